#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "xane3/autodiff/tensor.hpp"

namespace xane3::ad {

/// Named, ordered collection of trainable leaf tensors. Insertion order is
/// the canonical order for checkpoints and optimizer state.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor tensor;
  };

  Tensor add(const std::string& name, Shape shape, std::vector<double> values);
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::size_t size() const { return entries_.size(); }
  /// Total number of scalar parameters.
  std::size_t count() const;

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

  void zero_grad();

  /// All values concatenated in canonical order.
  std::vector<double> flatten() const;
  void assign(const std::vector<double>& flat);

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
  double max_abs_error = 0.0;  // largest |analytic - central| over all entries
  double max_abs_grad = 0.0;   // largest |analytic| over all entries
};

/// Compare reverse-mode gradients of a scalar function of the parameters
/// with central differences. Relative error per entry is
/// |a - c| / max(|a|, |c|, 1e-12). Throws if f is not deterministic.
GradCheckReport finite_diff_check(const std::function<Tensor(ParamStore&)>& f, ParamStore& params, double step);

}  // namespace xane3::ad
