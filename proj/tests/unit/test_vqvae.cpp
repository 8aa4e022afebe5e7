#include <random>

#include "doctest.h"
#include "dyntex/nn/autograd.hpp"
#include "dyntex/nn/ops.hpp"
#include "dyntex/vqvae.hpp"
#include "oracles.hpp"
#include "synthetic.hpp"
#include "test_util.hpp"

using namespace dyntex;
using namespace dyntex::vqvae;
using nn::Tensor;

namespace {

VqvaeConfig tiny(int entries = 8, int dim = 4) {
  VqvaeConfig c;
  c.hidden = 8;
  c.res_hidden = 4;
  c.res_blocks = 1;
  c.embed_dim = dim;
  c.codebook_size = entries;
  c.batch = 4;
  c.steps = 10;
  return c;
}

void set_codebook(VqvaeModel& m, const std::vector<float>& values) {
  auto cb = m.codebook();
  REQUIRE(cb.numel() == values.size());
  std::copy(values.begin(), values.end(), cb.mutable_values().begin());
}

}  // namespace

TEST_CASE("nearest_entries examples and ties") {
  const std::vector<float> cb{0, 0, 1, 1, 1, 1, -1, 0};
  CHECK(nearest_entries(std::vector<float>{0.9f, 1.2f}, cb, 4, 2) == std::vector<int>{1});
  // (0.5, 0.5) is equally far from entries 0 and 1; entry 2 duplicates entry 1.
  CHECK(nearest_entries(std::vector<float>{0.5f, 0.5f}, cb, 4, 2) == std::vector<int>{0});
  CHECK(nearest_entries(std::vector<float>{1, 1}, cb, 4, 2) == std::vector<int>{1});
  CHECK(nearest_entries(std::vector<float>{-3, 0, 0.1f, 0.1f}, cb, 4, 2) == std::vector<int>{3, 0});
  CHECK_THROWS_CODE(nearest_entries(std::vector<float>{1, 2, 3}, cb, 4, 2), Errc::DimensionMismatch);
}

TEST_CASE("quantize matches the exhaustive scan") {
  std::mt19937_64 rng(11);
  std::normal_distribution<float> gauss;
  VqvaeModel model(tiny(16, 5));
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<float> cb(16 * 5);
    for (auto& v : cb) v = gauss(rng);
    if (trial % 4 == 0) std::copy_n(cb.begin() + 10, 5, cb.begin() + 45);  // entry 9 duplicates entry 2
    set_codebook(model, cb);
    std::vector<float> z(3 * 5);
    for (auto& v : z) v = gauss(rng);
    if (trial % 4 == 0) std::copy_n(cb.begin() + 10, 5, z.begin());
    const auto q = model.quantize(Tensor<float>::from({3, 5}, z));
    for (int r = 0; r < 3; ++r) {
      const int want = oracle::nearest_entry(z.data() + r * 5, cb, 16, 5);
      CHECK(q.indices[r] == want);
      for (int j = 0; j < 5; ++j) CHECK(q.z_q[r * 5 + j] == cb[want * 5 + j]);
    }
    if (trial % 4 == 0) CHECK(q.indices[0] == 2);
  }
  CHECK_THROWS_CODE(model.quantize(Tensor<float>::zeros({2, 4})), Errc::DimensionMismatch);
}

TEST_CASE("encode and decode shapes") {
  VqvaeModel model(tiny());
  const auto x = Tensor<float>::full({2, 16, 16, 3}, 0.5f);
  const auto z = model.encode(x);
  CHECK(z.shape() == nn::Shape{2, 4, 4, 4});
  CHECK(model.decode(z).shape() == nn::Shape{2, 16, 16, 3});
  CHECK_THROWS_CODE(model.encode(Tensor<float>::zeros({2, 8, 8, 3})), Errc::ShapeMismatch);
  CHECK_THROWS_CODE(model.encode(Tensor<float>::zeros({2, 16, 16, 1})), Errc::ShapeMismatch);
  CHECK_THROWS_CODE(VqvaeModel(tiny(0)), Errc::InvalidArgument);
}

TEST_CASE("loss terms agree with a straight-line recomputation") {
  VqvaeModel model(tiny());
  const auto bank = synth::texture_bank(3, 4);
  const std::vector<std::size_t> all{0, 1, 2, 3};
  const auto x = bank.gather(all);
  const auto t = model.loss(x);

  const auto z_e = model.encode(x);
  const auto idx = nearest_entries(z_e.values(), model.codebook().values(), 8, 4);
  CHECK(idx == t.indices);
  double dz = 0;
  for (std::size_t i = 0; i < z_e.numel(); ++i) {
    const double d = z_e[i] - model.codebook()[idx[i / 4] * 4 + i % 4];
    dz += d * d;
  }
  dz /= static_cast<double>(z_e.numel());
  double dr = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) dr += std::pow(t.reconstruction[i] - x[i], 2);
  dr /= static_cast<double>(x.numel());
  CHECK(t.recon.item() == doctest::Approx(dr).epsilon(1e-5));
  CHECK(t.codebook.item() == doctest::Approx(dz).epsilon(1e-5));
  CHECK(t.commit.item() == doctest::Approx(dz).epsilon(1e-5));
  CHECK(t.total.item() == doctest::Approx(dr + 1.25 * dz).epsilon(1e-5));
}

TEST_CASE("gradient routing: codebook term moves entries, commitment moves the encoder") {
  VqvaeModel model(tiny());
  const auto bank = synth::texture_bank(5, 2);
  const std::vector<std::size_t> all{0, 1};
  auto params = model.parameters().tensors();
  auto cb = model.codebook();

  auto grads_of = [&](auto pick) {
    for (auto& p : params) p.zero_grad();
    const auto t = model.loss(bank.gather(all));
    nn::backward(pick(t));
  };
  grads_of([](const LossTerms& t) { return t.codebook; });
  CHECK(cb.has_grad());
  double enc_sum = 0;
  for (const auto& [name, p] : model.parameters().entries())
    if (name.rfind("enc", 0) == 0 && p.has_grad())
      for (float g : p.grad()) enc_sum += std::abs(g);
  CHECK(enc_sum == 0.0);

  grads_of([](const LossTerms& t) { return t.commit; });
  CHECK((!cb.has_grad() || std::all_of(cb.grad().begin(), cb.grad().end(), [](float g) { return g == 0.0f; })));
  enc_sum = 0;
  for (const auto& [name, p] : model.parameters().entries())
    if (name.rfind("enc", 0) == 0 && p.has_grad())
      for (float g : p.grad()) enc_sum += std::abs(g);
  CHECK(enc_sum > 0.0);

  // Reconstruction reaches the encoder through the straight-through path but not the codebook.
  grads_of([](const LossTerms& t) { return t.recon; });
  CHECK((!cb.has_grad() || std::all_of(cb.grad().begin(), cb.grad().end(), [](float g) { return g == 0.0f; })));
  enc_sum = 0;
  for (const auto& [name, p] : model.parameters().entries())
    if (name.rfind("enc", 0) == 0 && p.has_grad())
      for (float g : p.grad()) enc_sum += std::abs(g);
  CHECK(enc_sum > 0.0);
}

TEST_CASE("training memorizes a single patch and is deterministic") {
  auto cfg = tiny(16, 8);
  cfg.hidden = 16;
  cfg.res_hidden = 8;
  cfg.steps = 150;
  cfg.batch = 1;
  cfg.lr = 3e-3;
  const auto bank = synth::texture_bank(9, 1);
  VqvaeModel a(cfg), b(cfg);
  const double before = reconstruction_mse(a, bank);
  const auto ra = train_vqvae(a, bank);
  const auto rb = train_vqvae(b, bank);
  const double after = reconstruction_mse(a, bank);
  MESSAGE("single patch mse " << before << " -> " << after);
  CHECK(after < 0.1 * before);
  CHECK(after < 2e-3);
  REQUIRE(ra.log.size() == 150);
  CHECK(ra.log.back().total == rb.log.back().total);
  CHECK(std::equal(a.codebook().values().begin(), a.codebook().values().end(), b.codebook().values().begin()));

  CHECK_THROWS_CODE(train_vqvae(a, vqvae::PatchBank{}), Errc::EmptyDataset);
  vqvae::PatchBank gray;
  gray.channels = 1;
  gray.values.assign(256, 0.f);
  CHECK_THROWS_CODE(train_vqvae(a, gray), Errc::DimensionMismatch);
}

TEST_CASE("lookup, indices_to_patch and checkpoints") {
  VqvaeModel model(tiny());
  const auto bank = synth::texture_bank(6, 3);
  const std::vector<std::size_t> all{0, 1, 2};
  const auto x = bank.gather(all);
  const auto grids = model.encode_indices(x);
  REQUIRE(grids.size() == 3);
  const auto looked = model.lookup(grids);
  CHECK(looked.shape() == nn::Shape{3, 4, 4, 4});
  const auto q = model.quantize(model.encode(x));
  CHECK(std::equal(looked.values().begin(), looked.values().end(), q.z_q.values().begin()));
  const auto via_loss = model.loss(x).reconstruction;
  const auto patches = model.indices_to_patch(grids);
  CHECK(std::equal(patches.values().begin(), patches.values().end(), via_loss.values().begin()));

  LatentGrid bad{};
  bad[5] = 8;
  CHECK_THROWS_CODE(model.lookup(std::vector<LatentGrid>{bad}), Errc::OutOfVocabulary);

  TempDir dir("vq");
  model.save(dir.path() / "m.dytx");
  auto cfg = tiny();
  cfg.seed = 99;
  VqvaeModel other(cfg);
  other.load(dir.path() / "m.dytx");
  CHECK(other.encode_indices(x) == grids);
}
