#include "dyntex/token_io.hpp"

#include <algorithm>
#include <string>

#include "dyntex/binary_io.hpp"
#include "dyntex/error.hpp"

namespace dyntex::tokens {

namespace {
constexpr const char* kMagic = "DXTK";
constexpr std::uint16_t kVersion = 1;
}  // namespace

TokenFile::TokenFile(int codebook, int patches, int frames)
    : codebook_size(codebook),
      patches_per_frame(patches),
      frame_count(frames),
      indices(static_cast<std::size_t>(patches) * frames * vqvae::kGridLen, 0) {}

std::size_t TokenFile::offset(int patch, int frame) const {
  if (patch < 0 || patch >= patches_per_frame || frame < 0 || frame >= frame_count)
    throw Error(Errc::OutOfBounds, "token grid (" + std::to_string(patch) + ", " + std::to_string(frame) +
                                       ") outside " + std::to_string(patches_per_frame) + " x " +
                                       std::to_string(frame_count));
  return (static_cast<std::size_t>(patch) * frame_count + frame) * vqvae::kGridLen;
}

LatentGrid TokenFile::grid(int patch, int frame) const {
  LatentGrid g;
  std::copy_n(indices.begin() + offset(patch, frame), vqvae::kGridLen, g.begin());
  return g;
}

void TokenFile::set_grid(int patch, int frame, const LatentGrid& g) {
  std::copy(g.begin(), g.end(), indices.begin() + offset(patch, frame));
}

void TokenFile::validate() const {
  if (codebook_size < 2 || codebook_size > 65536)
    throw Error(Errc::BadFormat, "token codebook size " + std::to_string(codebook_size) + " outside [2, 65536]");
  if (patches_per_frame < 0 || frame_count < 0 ||
      indices.size() != static_cast<std::size_t>(patches_per_frame) * frame_count * vqvae::kGridLen)
    throw Error(Errc::BadFormat, "token payload does not match header");
  for (auto v : indices)
    if (v >= codebook_size) throw Error(Errc::OutOfVocabulary, "token " + std::to_string(v) + " >= codebook size");
}

void write_tokens(const std::filesystem::path& path, const TokenFile& file) {
  file.validate();
  binio::Writer w(path);
  w.magic(kMagic);
  w.put<std::uint16_t>(kVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(file.codebook_size));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(file.patches_per_frame));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(file.frame_count));
  w.put_array(file.indices.data(), file.indices.size());
  w.close();
}

TokenFile read_tokens(const std::filesystem::path& path) {
  binio::Reader r(path);
  r.expect_magic(kMagic);
  const auto version = r.get<std::uint16_t>();
  if (version != kVersion) throw Error(Errc::BadFormat, "unsupported DXTK version " + std::to_string(version));
  TokenFile f;
  f.codebook_size = static_cast<int>(r.get<std::uint32_t>());
  f.patches_per_frame = static_cast<int>(r.get<std::uint32_t>());
  f.frame_count = static_cast<int>(r.get<std::uint32_t>());
  f.indices.resize(static_cast<std::size_t>(f.patches_per_frame) * f.frame_count * vqvae::kGridLen);
  r.get_array(f.indices.data(), f.indices.size());
  if (!r.at_end()) throw Error(Errc::BadFormat, path.string() + ": trailing bytes");
  f.validate();
  return f;
}

}  // namespace dyntex::tokens
