#include "dyntex/vqvae.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "dyntex/error.hpp"
#include "dyntex/nn/adam.hpp"
#include "dyntex/nn/autograd.hpp"
#include "dyntex/nn/checkpoint.hpp"
#include "dyntex/nn/ops.hpp"

namespace dyntex::vqvae {

using namespace nn;

namespace {

constexpr const char* kTag = "vqvae/";

void need(bool ok, const std::string& msg) {
  if (!ok) throw Error(Errc::InvalidArgument, "vqvae config: " + msg);
}

}  // namespace

void VqvaeConfig::validate() const {
  need(channels >= 1, "channels must be >= 1");
  need(hidden >= 2 && hidden % 2 == 0, "hidden must be an even number >= 2");
  need(res_hidden >= 1, "res_hidden must be >= 1");
  need(res_blocks >= 0, "res_blocks must be >= 0");
  need(embed_dim >= 1, "embed_dim must be >= 1");
  need(codebook_size >= 2 && codebook_size <= 65536, "codebook_size must lie in [2, 65536]");
  need(std::isfinite(beta) && beta >= 0, "beta must be finite and >= 0");
  need(steps >= 0, "steps must be >= 0");
  need(batch >= 1, "batch must be >= 1");
  need(std::isfinite(lr) && lr > 0, "lr must be > 0");
}

VqvaeModel::Conv VqvaeModel::make_conv(const std::string& name, int co, int ci, int k, Rng& rng) {
  const int fan_in = ci * k * k;
  return {store_.create(name + ".w", {co, ci, k, k}, Init::KaimingUniform, rng, std::sqrt(3.0), fan_in),
          store_.create(name + ".b", {co}, Init::Zeros, rng)};
}

VqvaeModel::Conv VqvaeModel::make_conv_t(const std::string& name, int ci, int co, int k, Rng& rng) {
  // stride 2 with k=4: each output pixel sees ci*4 taps
  const int fan_in = ci * k * k / 4;
  return {store_.create(name + ".w", {ci, co, k, k}, Init::KaimingUniform, rng, std::sqrt(3.0), fan_in),
          store_.create(name + ".b", {co}, Init::Zeros, rng)};
}

VqvaeModel::VqvaeModel(const VqvaeConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(cfg_.seed);
  const int h = cfg_.hidden, c = cfg_.channels;
  enc1_ = make_conv("enc.down1", h / 2, c, 4, rng);
  enc2_ = make_conv("enc.down2", h, h / 2, 4, rng);
  enc3_ = make_conv("enc.conv", h, h, 3, rng);
  for (int i = 0; i < cfg_.res_blocks; ++i) {
    const std::string n = "enc.res" + std::to_string(i);
    enc_res_.push_back({make_conv(n + ".c3", cfg_.res_hidden, h, 3, rng), make_conv(n + ".c1", h, cfg_.res_hidden, 1, rng)});
  }
  enc_out_ = make_conv("enc.out", cfg_.embed_dim, h, 1, rng);
  codebook_ = store_.create("codebook", {cfg_.codebook_size, cfg_.embed_dim}, Init::Normal, rng,
                            1.0 / std::sqrt(static_cast<double>(cfg_.embed_dim)));
  dec_in_ = make_conv("dec.in", h, cfg_.embed_dim, 3, rng);
  for (int i = 0; i < cfg_.res_blocks; ++i) {
    const std::string n = "dec.res" + std::to_string(i);
    dec_res_.push_back({make_conv(n + ".c3", cfg_.res_hidden, h, 3, rng), make_conv(n + ".c1", h, cfg_.res_hidden, 1, rng)});
  }
  dec_t1_ = make_conv_t("dec.up1", h, h / 2, 4, rng);
  dec_t2_ = make_conv_t("dec.up2", h / 2, c, 4, rng);
}

Tensor<float> VqvaeModel::res_stack(Tensor<float> x, const std::vector<ResBlock>& blocks) const {
  for (const auto& b : blocks) {
    auto y = conv2d(relu(x), b.c3.w, b.c3.b, 1, 1);
    x = add(x, conv2d(relu(y), b.c1.w, b.c1.b, 1, 0));
  }
  return relu(x);
}

Tensor<float> VqvaeModel::encode(const Tensor<float>& patches) const {
  if (patches.rank() != 4 || patches.dim(1) != kPatchSize || patches.dim(2) != kPatchSize ||
      patches.dim(3) != cfg_.channels)
    throw Error(Errc::ShapeMismatch, "encode expects [N,16,16," + std::to_string(cfg_.channels) + "], got " +
                                         shape_str(patches.shape()));
  auto x = permute(patches, {0, 3, 1, 2});
  x = relu(conv2d(x, enc1_.w, enc1_.b, 2, 1));
  x = relu(conv2d(x, enc2_.w, enc2_.b, 2, 1));
  x = conv2d(x, enc3_.w, enc3_.b, 1, 1);
  x = res_stack(x, enc_res_);
  x = conv2d(x, enc_out_.w, enc_out_.b, 1, 0);
  return permute(x, {0, 2, 3, 1});
}

Tensor<float> VqvaeModel::decode(const Tensor<float>& z_q) const {
  if (z_q.rank() != 4 || z_q.dim(1) != kLatentSize || z_q.dim(2) != kLatentSize || z_q.dim(3) != cfg_.embed_dim)
    throw Error(Errc::ShapeMismatch, "decode expects [N,4,4," + std::to_string(cfg_.embed_dim) + "], got " +
                                         shape_str(z_q.shape()));
  auto x = permute(z_q, {0, 3, 1, 2});
  x = conv2d(x, dec_in_.w, dec_in_.b, 1, 1);
  x = res_stack(x, dec_res_);
  x = relu(conv_transpose2d(x, dec_t1_.w, dec_t1_.b, 2, 1));
  x = conv_transpose2d(x, dec_t2_.w, dec_t2_.b, 2, 1);
  return permute(x, {0, 2, 3, 1});
}

std::vector<int> nearest_entries(std::span<const float> z, std::span<const float> codebook, int entries, int dim) {
  if (dim <= 0 || z.size() % dim != 0 || codebook.size() != static_cast<std::size_t>(entries) * dim)
    throw Error(Errc::DimensionMismatch, "quantize: latent width does not match codebook width");
  const std::size_t rows = z.size() / dim;
  std::vector<int> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const float* zr = z.data() + r * dim;
    double best = std::numeric_limits<double>::infinity();
    int arg = 0;
    for (int e = 0; e < entries; ++e) {
      const float* c = codebook.data() + static_cast<std::size_t>(e) * dim;
      double d = 0.0;
      for (int j = 0; j < dim; ++j) {
        const double diff = static_cast<double>(zr[j]) - static_cast<double>(c[j]);
        d += diff * diff;
      }
      if (d < best) {
        best = d;
        arg = e;
      }
    }
    out[r] = arg;
  }
  return out;
}

Quantized VqvaeModel::quantize(const Tensor<float>& z_e) const {
  if (z_e.rank() < 1 || z_e.dim(-1) != cfg_.embed_dim)
    throw Error(Errc::DimensionMismatch, "quantize: latent " + shape_str(z_e.shape()) + " vs codebook width " +
                                             std::to_string(cfg_.embed_dim));
  Quantized q;
  q.indices = nearest_entries(z_e.values(), codebook_.values(), cfg_.codebook_size, cfg_.embed_dim);
  q.entries = reshape(embedding(codebook_, q.indices), z_e.shape());
  q.z_q = straight_through(z_e, q.entries);
  return q;
}

LossTerms VqvaeModel::loss(const Tensor<float>& patches) const {
  const auto z_e = encode(patches);
  auto q = quantize(z_e);
  LossTerms t;
  t.reconstruction = decode(q.z_q);
  t.recon = mse(t.reconstruction, patches);
  t.codebook = mse(q.entries, stop_gradient(z_e));
  t.commit = mse(stop_gradient(q.entries), z_e);
  t.total = add(add(t.recon, t.codebook), scale(t.commit, static_cast<float>(cfg_.beta)));
  t.indices = std::move(q.indices);
  return t;
}

std::vector<LatentGrid> VqvaeModel::encode_indices(const Tensor<float>& patches) const {
  const auto z_e = encode(patches);
  const auto idx = nearest_entries(z_e.values(), codebook_.values(), cfg_.codebook_size, cfg_.embed_dim);
  std::vector<LatentGrid> grids(idx.size() / kGridLen);
  for (std::size_t i = 0; i < idx.size(); ++i) grids[i / kGridLen][i % kGridLen] = static_cast<std::uint16_t>(idx[i]);
  return grids;
}

Tensor<float> VqvaeModel::lookup(std::span<const LatentGrid> grids) const {
  std::vector<int> idx;
  idx.reserve(grids.size() * kGridLen);
  for (const auto& g : grids) idx.insert(idx.end(), g.begin(), g.end());
  return reshape(embedding(codebook_.detach(), idx),
                 {static_cast<int>(grids.size()), kLatentSize, kLatentSize, cfg_.embed_dim});
}

Tensor<float> VqvaeModel::indices_to_patch(std::span<const LatentGrid> grids) const {
  return decode(lookup(grids));
}

void VqvaeModel::save(const std::filesystem::path& path) const {
  save_checkpoint(path, store_.export_tensors(kTag));
}

void VqvaeModel::load(const std::filesystem::path& path) {
  store_.import_tensors(load_checkpoint(path), kTag);
}

Tensor<float> PatchBank::gather(std::span<const std::size_t> which) const {
  const std::size_t len = static_cast<std::size_t>(kPatchSize) * kPatchSize * channels;
  std::vector<float> out(which.size() * len);
  for (std::size_t i = 0; i < which.size(); ++i) {
    if (which[i] >= size()) throw Error(Errc::OutOfBounds, "patch index " + std::to_string(which[i]) + " out of range");
    std::copy_n(values.begin() + which[i] * len, len, out.begin() + i * len);
  }
  return Tensor<float>::from({static_cast<int>(which.size()), kPatchSize, kPatchSize, channels}, std::move(out));
}

TrainReport train_vqvae(VqvaeModel& model, const PatchBank& patches, const std::function<void(const StepLog&)>& on_step) {
  const auto& cfg = model.config();
  if (patches.channels != cfg.channels)
    throw Error(Errc::DimensionMismatch, "patch bank has " + std::to_string(patches.channels) +
                                             " channels, model expects " + std::to_string(cfg.channels));
  const std::size_t n = patches.size();
  if (n == 0) throw Error(Errc::EmptyDataset, "train_vqvae needs at least one patch");

  auto params = model.parameters().tensors();
  AdamState<float> adam;
  adam.lr = cfg.lr;
  Rng rng(cfg.seed ^ 0x5EEDBA7C4ULL);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = n;

  const int batch = static_cast<int>(std::min<std::size_t>(cfg.batch, n));
  const int usage_window = static_cast<int>((n + batch - 1) / batch);
  TrainReport report;
  report.usage.assign(cfg.codebook_size, 0);
  std::vector<std::size_t> pick(batch);
  for (int step = 1; step <= cfg.steps; ++step) {
    for (auto& p : pick) {
      if (cursor == n) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      p = order[cursor++];
    }
    zero_grads<float>(params);
    const auto terms = model.loss(patches.gather(pick));
    backward(terms.total);
    adam_step<float>(params, adam);

    StepLog entry{step, terms.total.item(), terms.recon.item(), terms.codebook.item(), terms.commit.item()};
    report.log.push_back(entry);
    if (on_step) on_step(entry);
    if (step > cfg.steps - usage_window)
      for (int i : terms.indices) ++report.usage[i];
  }
  zero_grads<float>(params);
  return report;
}

double reconstruction_mse(const VqvaeModel& model, const PatchBank& patches, int batch) {
  const std::size_t n = patches.size();
  if (n == 0) throw Error(Errc::EmptyDataset, "reconstruction_mse over an empty bank");
  NoGradGuard no_grad;
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t s = 0; s < n; s += batch) {
    std::vector<std::size_t> pick;
    for (std::size_t i = s; i < std::min(n, s + batch); ++i) pick.push_back(i);
    const auto x = patches.gather(pick);
    const auto grids = model.encode_indices(x);
    const auto y = model.indices_to_patch(grids);
    for (std::size_t i = 0; i < x.numel(); ++i) {
      const double d = static_cast<double>(y[i]) - x[i];
      total += d * d;
    }
    count += x.numel();
  }
  return total / static_cast<double>(count);
}

}  // namespace dyntex::vqvae
