#include "dyntex/nn/layers.hpp"

#include <algorithm>
#include <cmath>

#include "dyntex/error.hpp"

namespace dyntex::nn {

Tensor<float> ParameterStore::create(std::string name, Shape shape, Init init, Rng& rng, double scale,
                                     int fan_in) {
  for (const auto& e : entries_)
    if (e.name == name) throw Error(Errc::InvalidArgument, "duplicate parameter " + name);
  std::vector<float> values(numel(shape), 0.0f);
  switch (init) {
    case Init::Zeros:
      break;
    case Init::Ones:
      std::fill(values.begin(), values.end(), 1.0f);
      break;
    case Init::Normal: {
      std::normal_distribution<double> dist(0.0, scale);
      for (auto& v : values) v = static_cast<float>(dist(rng));
      break;
    }
    case Init::KaimingUniform: {
      if (fan_in <= 0) throw Error(Errc::InvalidArgument, "KaimingUniform needs fan_in");
      const double bound = scale / std::sqrt(static_cast<double>(fan_in));
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (auto& v : values) v = static_cast<float>(dist(rng));
      break;
    }
  }
  auto t = Tensor<float>::from(std::move(shape), std::move(values), true);
  entries_.push_back({std::move(name), t});
  return t;
}

std::vector<Tensor<float>> ParameterStore::tensors() const {
  std::vector<Tensor<float>> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.tensor);
  return out;
}

std::size_t ParameterStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.numel();
  return n;
}

std::vector<NamedTensor> ParameterStore::export_tensors(std::string_view tag) const {
  std::vector<NamedTensor> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back({std::string(tag) + e.name, e.tensor.detach()});
  return out;
}

void ParameterStore::import_tensors(const std::vector<NamedTensor>& tensors, std::string_view tag) {
  for (auto& e : entries_) {
    const auto& src = find_tensor(tensors, std::string(tag) + e.name);
    if (src.shape() != e.tensor.shape())
      throw Error(Errc::ShapeMismatch, "checkpoint tensor " + e.name + " has shape " + shape_str(src.shape()) +
                                           ", expected " + shape_str(e.tensor.shape()));
    std::copy(src.values().begin(), src.values().end(), e.tensor.mutable_values().begin());
  }
}

}  // namespace dyntex::nn
