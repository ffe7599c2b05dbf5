#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "xane3/autodiff/tensor.hpp"

namespace xane3::ad {

/// Sparse 3-index coefficient block C[a][b][c] with dims (d1, d2, d3).
struct Coeff3 {
  struct Entry {
    std::size_t a, b, c;
    double value;
  };
  std::size_t d1 = 0, d2 = 0, d3 = 0;
  std::vector<Entry> entries;
};

// Elementwise binary ops. Operands must have equal rank; a dimension of size
// 1 broadcasts against any size.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);
Tensor square(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softplus(const Tensor& x);

/// Value copy through which no gradient flows.
Tensor detach(const Tensor& x);

// Reductions. Axis reductions keep the reduced axis with size 1.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_axis(const Tensor& x, std::size_t axis);
Tensor mean_axis(const Tensor& x, std::size_t axis);
/// Population variance along an axis.
Tensor var_axis(const Tensor& x, std::size_t axis);

/// (m x k) * (k x n).
Tensor matmul(const Tensor& a, const Tensor& b);
/// out[n,v,c] = sum_k x[n,k,c] * w[k,v]; x is (N,K,C), w is (K,V).
Tensor mix_channels(const Tensor& x, const Tensor& w);

Tensor reshape(const Tensor& x, Shape shape);
Tensor narrow(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);

/// Rows (leading-axis slices) of x selected by index.
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index);
/// out[index[i]] += x[i] over leading-axis slices; out has n_out rows.
Tensor scatter_add_rows(const Tensor& x, std::span<const std::size_t> index, std::size_t n_out);

/// out[e,u,c] = sum_{a,b} C[a,b,c] x[e,u,a] y[e,b]; x is (E,M,d1), y is (E,d2).
Tensor cg_contract(const Tensor& x, const Tensor& y, const Coeff3& coeff);

/// out[n,q,p] = mean over edges e with dst[e]==n of r[e,q] * x[e,p].
/// Nodes without incoming edges receive zeros. x is (E,P), r is (E,Q).
Tensor radial_scatter_mean(const Tensor& x, const Tensor& r, std::span<const std::size_t> dst,
                           std::size_t n_out);

/// Softmax of a 1-D score vector within each segment, restricted to entries
/// with mask true. Masked entries (and fully masked segments) get weight 0.
Tensor masked_softmax(const Tensor& scores, std::span<const std::size_t> segment,
                      std::size_t n_segments, const std::vector<bool>& mask);

}  // namespace xane3::ad
