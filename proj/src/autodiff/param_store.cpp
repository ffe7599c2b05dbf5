#include "xane3/autodiff/param_store.hpp"

#include <algorithm>
#include <cmath>

#include "xane3/errors.hpp"

namespace xane3::ad {

Tensor ParamStore::add(const std::string& name, Shape shape, std::vector<double> values) {
  if (contains(name)) throw ValueError("duplicate parameter '" + name + "'");
  Tensor t = Tensor::parameter(std::move(shape), std::move(values));
  index_.emplace(name, entries_.size());
  entries_.push_back({name, t});
  return t;
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ValueError("unknown parameter '" + name + "'");
  return entries_[it->second].tensor;
}

std::size_t ParamStore::count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

std::vector<double> ParamStore::flatten() const {
  std::vector<double> flat;
  flat.reserve(count());
  for (const auto& e : entries_) flat.insert(flat.end(), e.tensor.data().begin(), e.tensor.data().end());
  return flat;
}

void ParamStore::assign(const std::vector<double>& flat) {
  if (flat.size() != count()) {
    throw ShapeError("ParamStore::assign: expected " + std::to_string(count()) + " values, got " +
                     std::to_string(flat.size()));
  }
  std::size_t offset = 0;
  for (auto& e : entries_) {
    auto dst = e.tensor.mutable_data();
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(offset), dst.size(), dst.begin());
    offset += dst.size();
  }
}

GradCheckReport finite_diff_check(const std::function<Tensor(ParamStore&)>& f, ParamStore& params, double step) {
  if (!(step > 0)) throw ValueError("finite_diff_check: step must be positive");
  params.zero_grad();
  const Tensor loss = f(params);
  const double base = loss.item();
  backprop(loss);

  std::vector<std::vector<double>> analytic;
  for (const auto& e : params.entries()) analytic.push_back(e.tensor.grad());
  params.zero_grad();

  NoGradGuard no_grad;
  if (f(params).item() != base) throw ValueError("finite_diff_check: function is not deterministic");

  GradCheckReport report;
  for (std::size_t p = 0; p < params.entries().size(); ++p) {
    auto& entry = params.entries()[p];
    auto values = entry.tensor.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step;
      const double up = f(params).item();
      values[i] = saved - step;
      const double down = f(params).item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[p][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-12});
      const double err = std::abs(a - numeric) / denom;
      ++report.checked;
      report.max_abs_error = std::max(report.max_abs_error, std::abs(a - numeric));
      report.max_abs_grad = std::max(report.max_abs_grad, std::abs(a));
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_param = entry.name;
        report.worst_index = i;
        report.analytic = a;
        report.numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace xane3::ad
