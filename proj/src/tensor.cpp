#include "hsfl/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

namespace hsfl {

namespace {

size_t element_count(const std::vector<int>& shape) {
  size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw Error("Tensor: negative dimension");
    n *= static_cast<size_t>(d);
  }
  return n;
}

}  // namespace

Tensor Tensor::zeros(std::vector<int> shape) {
  Tensor t;
  t.data.assign(element_count(shape), 0.0);
  t.shape = std::move(shape);
  return t;
}

Tensor Tensor::vec(std::vector<double> values) {
  Tensor t;
  t.shape = {static_cast<int>(values.size())};
  t.data = std::move(values);
  return t;
}

Tensor Tensor::matrix(int rows, int cols, std::vector<double> values) {
  if (values.size() != static_cast<size_t>(rows) * static_cast<size_t>(cols))
    throw Error("Tensor::matrix: value count does not match rows*cols");
  Tensor t;
  t.shape = {rows, cols};
  t.data = std::move(values);
  return t;
}

int Tensor::rows() const {
  if (rank() != 2) throw Error("Tensor::rows: not a matrix, shape " + shape_str());
  return shape[0];
}

int Tensor::cols() const {
  if (rank() != 2) throw Error("Tensor::cols: not a matrix, shape " + shape_str());
  return shape[1];
}

double& Tensor::at(int r, int c) {
  return data[static_cast<size_t>(r) * static_cast<size_t>(cols()) + static_cast<size_t>(c)];
}

double Tensor::at(int r, int c) const {
  return data[static_cast<size_t>(r) * static_cast<size_t>(cols()) + static_cast<size_t>(c)];
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

void Tensor::check_finite(const char* what) const {
  for (double v : data) {
    if (!std::isfinite(v)) throw Error(std::string(what) + ": non-finite value in tensor");
  }
}

Tensor matmul_value(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
    throw Error("matmul: incompatible shapes " + a.shape_str() + " x " + b.shape_str());
  const int m = a.rows(), k = a.cols(), n = b.cols();
  Tensor c = Tensor::zeros({m, n});
  const double* pa = a.data.data();
  const double* pb = b.data.data();
  double* pc = c.data.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int p = 0; p < k; ++p) s += pa[i * k + p] * pb[p * n + j];
      pc[i * n + j] = s;
    }
  return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols())
    throw Error("matmul_nt: incompatible shapes " + a.shape_str() + " x " + b.shape_str());
  const int m = a.rows(), k = a.cols(), n = b.rows();
  Tensor c = Tensor::zeros({m, n});
  const double* pa = a.data.data();
  const double* pb = b.data.data();
  double* pc = c.data.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int p = 0; p < k; ++p) s += pa[i * k + p] * pb[j * k + p];
      pc[i * n + j] = s;
    }
  return c;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.rows() != b.rows())
    throw Error("matmul_tn: incompatible shapes " + a.shape_str() + " x " + b.shape_str());
  const int m = a.cols(), k = a.rows(), n = b.cols();
  Tensor c = Tensor::zeros({m, n});
  const double* pa = a.data.data();
  const double* pb = b.data.data();
  double* pc = c.data.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int p = 0; p < k; ++p) s += pa[p * m + i] * pb[p * n + j];
      pc[i * n + j] = s;
    }
  return c;
}

}  // namespace hsfl
