#include "dyntex/nn/checkpoint.hpp"

#include <cstdint>

#include "dyntex/binary_io.hpp"
#include "dyntex/error.hpp"

namespace dyntex::nn {

namespace {
constexpr std::string_view kMagic = "DYTX";
constexpr std::uint16_t kVersion = 1;
}  // namespace

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  binio::Writer w(path);
  w.magic(kMagic);
  w.put<std::uint16_t>(kVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (t.rank() > 255) throw Error(Errc::InvalidArgument, "tensor rank exceeds 255");
    w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.bytes(name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
    for (int d : t.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    w.put_array(t.values().data(), t.numel());
  }
  w.close();
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  binio::Reader r(path);
  r.expect_magic(kMagic);
  const auto version = r.get<std::uint16_t>();
  if (version != kVersion) throw Error(Errc::BadFormat, "unsupported DYTX version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>();
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint32_t>();
    if (len > (1u << 16)) throw Error(Errc::BadFormat, "implausible tensor name length");
    std::string name = r.bytes(len);
    const auto rank = r.get<std::uint8_t>();
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<int>(r.get<std::uint32_t>());
    std::vector<float> values(numel(shape));
    r.get_array(values.data(), values.size());
    out.push_back({std::move(name), Tensor<float>::from(std::move(shape), std::move(values))});
  }
  return out;
}

const Tensor<float>& find_tensor(const std::vector<NamedTensor>& tensors, std::string_view name) {
  for (const auto& nt : tensors)
    if (nt.name == name) return nt.tensor;
  throw Error(Errc::NotFound, "checkpoint has no tensor named " + std::string(name));
}

}  // namespace dyntex::nn
