#pragma once

#include <string>
#include <vector>

#include "hsfl/common.hpp"

namespace hsfl {

// Dense row-major tensor of doubles. Rank 1 (vectors) and rank 2 (matrices)
// are the only shapes the model ever produces.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;

  static Tensor zeros(std::vector<int> shape);
  static Tensor vec(std::vector<double> values);
  static Tensor matrix(int rows, int cols, std::vector<double> values);

  bool empty() const { return data.empty(); }
  size_t size() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }

  int rows() const;
  int cols() const;

  double& at(int r, int c);
  double at(int r, int c) const;

  bool same_shape(const Tensor& other) const { return shape == other.shape; }
  std::string shape_str() const;

  // Throws if any entry is NaN or infinite; `what` names the operation.
  void check_finite(const char* what) const;

  bool operator==(const Tensor& other) const = default;
};

// C = A(m,k) * B(k,n)
Tensor matmul_value(const Tensor& a, const Tensor& b);
// C = A(m,k) * B(n,k)^T
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// C = A(k,m)^T * B(k,n)
Tensor matmul_tn(const Tensor& a, const Tensor& b);

}  // namespace hsfl
