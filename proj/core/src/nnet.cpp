#include "fsdial/nnet.hpp"

#include <cstring>

#include <json.hpp>

#include "fsdial/io_util.hpp"

namespace fsdial {

using nlohmann::json;

namespace {
constexpr char kMagic[8] = {'F', 'S', 'D', 'L', 'C', 'K', 'P', 'T'};
constexpr uint32_t kFormatVersion = 1;

json config_to_json(const ModelConfig& c) {
  return json{{"n_layers", c.n_layers},   {"n_heads", c.n_heads},
              {"d_model", c.d_model},     {"d_ff", c.d_ff},
              {"vocab_size", c.vocab_size}, {"max_seq", c.max_seq},
              {"max_turns", c.max_turns}, {"dropout_rate", c.dropout_rate},
              {"init_seed", c.init_seed}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_seq = j.at("max_seq").get<int>();
  c.max_turns = j.at("max_turns").get<int>();
  c.dropout_rate = j.at("dropout_rate").get<double>();
  c.init_seed = j.at("init_seed").get<uint64_t>();
  return c;
}

}  // namespace

uint64_t Checkpoint::content_hash() const {
  uint64_t h = fnv1a64(payload.data(), payload.size() * sizeof(float));
  h = fnv1a64(&vocab_fingerprint, sizeof vocab_fingerprint, h);
  std::string cfg = config_to_json(config).dump();
  return fnv1a64(cfg, h);
}

Checkpoint snapshot(const ModelState<float>& m, uint64_t vocab_fingerprint) {
  Checkpoint ckpt;
  ckpt.config = m.config;
  ckpt.vocab_fingerprint = vocab_fingerprint;
  ckpt.payload.reserve(m.params.param_count());
  m.params.for_each_tensor([&](const char*, const Matrix<float>& t) {
    ckpt.payload.insert(ckpt.payload.end(), t.data.begin(), t.data.end());
  });
  return ckpt;
}

ModelState<float> restore(const Checkpoint& ckpt) {
  ckpt.config.validate();
  ModelState<float> m{ckpt.config, make_zero_params<float>(ckpt.config)};
  if (ckpt.payload.size() != m.params.param_count()) {
    throw std::runtime_error("checkpoint payload size does not match config shapes");
  }
  size_t off = 0;
  m.params.for_each_tensor([&](const char*, Matrix<float>& t) {
    std::copy(ckpt.payload.begin() + off, ckpt.payload.begin() + off + t.size(), t.data.begin());
    off += t.size();
  });
  return m;
}

ModelState<float> restore(const Checkpoint& ckpt, const Vocab& vocab) {
  if (vocab.fingerprint() != ckpt.vocab_fingerprint) {
    throw std::runtime_error("checkpoint vocab fingerprint mismatch");
  }
  if (vocab.size() != ckpt.config.vocab_size) {
    throw std::runtime_error("checkpoint vocab size mismatch");
  }
  return restore(ckpt);
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path,
                     const std::string& meta_json) {
  json header;
  header["format"] = "fsdial-checkpoint";
  header["version"] = kFormatVersion;
  header["config"] = config_to_json(ckpt.config);
  char fp[17];
  std::snprintf(fp, sizeof fp, "%016llx", static_cast<unsigned long long>(ckpt.vocab_fingerprint));
  header["vocab_fingerprint"] = fp;
  header["payload_floats"] = ckpt.payload.size();
  header["meta"] = json::parse(meta_json);
  // Tensor manifest in payload order.
  ModelState<float> shape{ckpt.config, make_zero_params<float>(ckpt.config)};
  json manifest = json::array();
  shape.params.for_each_tensor([&](const char* name, const Matrix<float>& t) {
    manifest.push_back({{"name", name}, {"rows", t.rows}, {"cols", t.cols}});
  });
  header["tensors"] = std::move(manifest);

  std::string head = header.dump();
  std::string out;
  out.reserve(sizeof kMagic + 8 + head.size() + ckpt.payload.size() * sizeof(float));
  out.append(kMagic, sizeof kMagic);
  uint64_t hlen = head.size();
  out.append(reinterpret_cast<const char*>(&hlen), sizeof hlen);
  out += head;
  out.append(reinterpret_cast<const char*>(ckpt.payload.data()), ckpt.payload.size() * sizeof(float));
  atomic_write_file(path, out);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::string raw = read_file(path);
  if (raw.size() < sizeof kMagic + 8 || std::memcmp(raw.data(), kMagic, sizeof kMagic) != 0) {
    throw std::runtime_error("not a checkpoint file: " + path.string());
  }
  uint64_t hlen = 0;
  std::memcpy(&hlen, raw.data() + sizeof kMagic, sizeof hlen);
  size_t payload_off = sizeof kMagic + 8 + hlen;
  if (payload_off > raw.size()) throw std::runtime_error("truncated checkpoint header");
  json header = json::parse(raw.substr(sizeof kMagic + 8, hlen));
  if (header.at("format") != "fsdial-checkpoint" || header.at("version") != kFormatVersion) {
    throw std::runtime_error("unsupported checkpoint format/version");
  }

  Checkpoint ckpt;
  ckpt.config = config_from_json(header.at("config"));
  ckpt.vocab_fingerprint =
      std::stoull(header.at("vocab_fingerprint").get<std::string>(), nullptr, 16);
  size_t n = header.at("payload_floats").get<size_t>();
  if (raw.size() - payload_off != n * sizeof(float)) {
    throw std::runtime_error("checkpoint payload size mismatch");
  }
  ckpt.payload.resize(n);
  std::memcpy(ckpt.payload.data(), raw.data() + payload_off, n * sizeof(float));
  return ckpt;
}

}  // namespace fsdial
