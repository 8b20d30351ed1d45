#pragma once

#include <algorithm>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace fsdial {

// Dense row-major matrix. Vectors are stored as 1xN so every parameter in
// the model shares one type and one serialization path.
template <typename T>
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(int r, int c, T fill = T{}) : rows(r), cols(c), data(static_cast<size_t>(r) * c, fill) {}

  T& operator()(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  T operator()(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
  T* row(int r) { return data.data() + static_cast<size_t>(r) * cols; }
  const T* row(int r) const { return data.data() + static_cast<size_t>(r) * cols; }

  size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  void set_zero() { std::fill(data.begin(), data.end(), T{}); }
  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

  bool operator==(const Matrix&) const = default;
};

// c = a * b for a [n,k], b [k,m].
template <typename T>
void matmul(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c) {
  if (a.cols != b.rows) throw std::invalid_argument("matmul: inner dims differ");
  c = Matrix<T>(a.rows, b.cols);
  for (int i = 0; i < a.rows; ++i) {
    const T* arow = a.row(i);
    T* crow = c.row(i);
    for (int k = 0; k < a.cols; ++k) {
      const T av = arow[k];
      if (av == T{}) continue;
      const T* brow = b.row(k);
      for (int j = 0; j < b.cols; ++j) crow[j] += av * brow[j];
    }
  }
}

// c += a * b^T for a [n,k], b [m,k]; c is [n,m].
template <typename T>
void matmul_bt_acc(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c) {
  if (a.cols != b.cols) throw std::invalid_argument("matmul_bt_acc: inner dims differ");
  if (c.rows != a.rows || c.cols != b.rows) throw std::invalid_argument("matmul_bt_acc: bad out shape");
  for (int i = 0; i < a.rows; ++i) {
    const T* arow = a.row(i);
    T* crow = c.row(i);
    for (int j = 0; j < b.rows; ++j) {
      const T* brow = b.row(j);
      T s{};
      for (int k = 0; k < a.cols; ++k) s += arow[k] * brow[k];
      crow[j] += s;
    }
  }
}

// c += a^T * b for a [k,n], b [k,m]; c is [n,m].
template <typename T>
void matmul_at_acc(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c) {
  if (a.rows != b.rows) throw std::invalid_argument("matmul_at_acc: inner dims differ");
  if (c.rows != a.cols || c.cols != b.cols) throw std::invalid_argument("matmul_at_acc: bad out shape");
  for (int k = 0; k < a.rows; ++k) {
    const T* arow = a.row(k);
    const T* brow = b.row(k);
    for (int i = 0; i < a.cols; ++i) {
      const T av = arow[i];
      if (av == T{}) continue;
      T* crow = c.row(i);
      for (int j = 0; j < b.cols; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace fsdial
