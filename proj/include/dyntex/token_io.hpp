#pragma once

// "DXTK" latent token streams: magic, u16 version, u32 codebook size,
// u32 patches per frame, u32 frame count, then u16 indices ordered
// patch-major, frame-minor, 16 per grid.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "dyntex/vqvae.hpp"

namespace dyntex::tokens {

using vqvae::LatentGrid;

struct TokenFile {
  int codebook_size = 256;
  int patches_per_frame = 0;
  int frame_count = 0;
  std::vector<std::uint16_t> indices;

  TokenFile() = default;
  TokenFile(int codebook, int patches, int frames);

  std::size_t offset(int patch, int frame) const;
  LatentGrid grid(int patch, int frame) const;
  void set_grid(int patch, int frame, const LatentGrid& g);
  /// Every index < codebook_size and the payload size matches the header.
  void validate() const;
};

void write_tokens(const std::filesystem::path& path, const TokenFile& file);
TokenFile read_tokens(const std::filesystem::path& path);

}  // namespace dyntex::tokens
