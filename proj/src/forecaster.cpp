#include "dyntex/forecaster.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>

#include "dyntex/error.hpp"
#include "dyntex/nn/adam.hpp"
#include "dyntex/nn/autograd.hpp"
#include "dyntex/nn/checkpoint.hpp"
#include "dyntex/nn/ops.hpp"
#include "nn/reduce.hpp"

namespace dyntex::forecaster {

using namespace nn;

namespace {

constexpr const char* kTag = "gpt/";

void need(bool ok, const std::string& msg) {
  if (!ok) throw Error(Errc::InvalidArgument, "forecaster config: " + msg);
}

}  // namespace

void ForecasterConfig::validate() const {
  need(vocab >= 2, "vocab must be >= 2");
  need(d_model >= 1, "d_model must be >= 1");
  need(layers >= 1, "layers must be >= 1");
  need(heads >= 1 && d_model % heads == 0, "heads must divide d_model");
  need(ff_mult >= 1, "ff_mult must be >= 1");
  need(max_len >= 2 * kGridLen, "max_len must hold at least two frames (32 tokens)");
  need(steps >= 0, "steps must be >= 0");
  need(batch >= 1, "batch must be >= 1");
  need(std::isfinite(lr) && lr > 0, "lr must be > 0");
  need(std::isfinite(grad_clip) && grad_clip >= 0, "grad_clip must be >= 0");
  need(val_fraction >= 0 && val_fraction < 1, "val_fraction must lie in [0, 1)");
  need(eval_every >= 0, "eval_every must be >= 0");
}

void SamplerConfig::validate() const {
  if (!(std::isfinite(temperature) && temperature > 0))
    throw Error(Errc::InvalidArgument, "sampler temperature must be finite and > 0");
}

// ---- datasets ---------------------------------------------------------------

std::vector<TokenSequence> build_dataset(std::span<const LocatedGrid> stream) {
  if (stream.empty()) throw Error(Errc::EmptyDataset, "empty token stream");
  std::map<int, std::map<int, const LatentGrid*>> by_location;
  for (const auto& g : stream) {
    if (g.frame < 0 || g.location < 0) throw Error(Errc::RaggedCoverage, "negative location or frame index");
    if (!by_location[g.location].emplace(g.frame, &g.grid).second)
      throw Error(Errc::RaggedCoverage, "location " + std::to_string(g.location) + " has frame " +
                                            std::to_string(g.frame) + " twice");
  }
  const std::size_t frames = by_location.begin()->second.size();
  std::vector<TokenSequence> out;
  for (const auto& [loc, grids] : by_location) {
    if (grids.size() != frames || grids.rbegin()->first != static_cast<int>(frames) - 1)
      throw Error(Errc::RaggedCoverage, "location " + std::to_string(loc) + " does not cover frames 0.." +
                                            std::to_string(frames - 1));
    TokenSequence s;
    s.location = loc;
    for (const auto& [f, g] : grids) s.tokens.insert(s.tokens.end(), g->begin(), g->end());
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<TokenSequence> build_dataset(const tokens::TokenFile& file) {
  file.validate();
  std::vector<LocatedGrid> stream;
  for (int p = 0; p < file.patches_per_frame; ++p)
    for (int f = 0; f < file.frame_count; ++f) stream.push_back({p, f, file.grid(p, f)});
  return build_dataset(stream);
}

Split split_dataset(std::vector<TokenSequence> data, double val_fraction, std::uint64_t seed) {
  if (!(val_fraction >= 0 && val_fraction < 1)) throw Error(Errc::InvalidArgument, "val_fraction must lie in [0, 1)");
  const std::size_t n = data.size();
  std::size_t n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n)));
  if (val_fraction > 0 && n >= 2) n_val = std::clamp<std::size_t>(n_val, 1, n - 1);
  if (n < 2) n_val = 0;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed ^ 0xDA7A5E7ULL);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<bool> is_val(n, false);
  for (std::size_t i = 0; i < n_val; ++i) is_val[order[i]] = true;
  Split s;
  for (std::size_t i = 0; i < n; ++i) (is_val[i] ? s.validation : s.train).push_back(std::move(data[i]));
  return s;
}

// ---- model ------------------------------------------------------------------

Forecaster::Forecaster(const ForecasterConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(cfg_.seed);
  const int d = cfg_.d_model, ff = cfg_.ff_mult * d;
  const double sd = 0.02, sd_out = 0.02 / std::sqrt(2.0 * cfg_.layers);
  tok_emb_ = store_.create("tok_emb", {cfg_.vocab, d}, Init::Normal, rng, sd);
  pos_emb_ = store_.create("pos_emb", {cfg_.max_len, d}, Init::Normal, rng, sd);
  for (int l = 0; l < cfg_.layers; ++l) {
    const std::string n = "block" + std::to_string(l) + ".";
    Block b;
    b.ln1_g = store_.create(n + "ln1.g", {d}, Init::Ones, rng);
    b.ln1_b = store_.create(n + "ln1.b", {d}, Init::Zeros, rng);
    b.wq = store_.create(n + "attn.wq", {d, d}, Init::Normal, rng, sd);
    b.bq = store_.create(n + "attn.bq", {d}, Init::Zeros, rng);
    b.wk = store_.create(n + "attn.wk", {d, d}, Init::Normal, rng, sd);
    b.bk = store_.create(n + "attn.bk", {d}, Init::Zeros, rng);
    b.wv = store_.create(n + "attn.wv", {d, d}, Init::Normal, rng, sd);
    b.bv = store_.create(n + "attn.bv", {d}, Init::Zeros, rng);
    b.wo = store_.create(n + "attn.wo", {d, d}, Init::Normal, rng, sd_out);
    b.bo = store_.create(n + "attn.bo", {d}, Init::Zeros, rng);
    b.ln2_g = store_.create(n + "ln2.g", {d}, Init::Ones, rng);
    b.ln2_b = store_.create(n + "ln2.b", {d}, Init::Zeros, rng);
    b.w1 = store_.create(n + "mlp.w1", {d, ff}, Init::Normal, rng, sd);
    b.b1 = store_.create(n + "mlp.b1", {ff}, Init::Zeros, rng);
    b.w2 = store_.create(n + "mlp.w2", {ff, d}, Init::Normal, rng, sd_out);
    b.b2 = store_.create(n + "mlp.b2", {d}, Init::Zeros, rng);
    blocks_.push_back(std::move(b));
  }
  lnf_g_ = store_.create("ln_f.g", {d}, Init::Ones, rng);
  lnf_b_ = store_.create("ln_f.b", {d}, Init::Zeros, rng);
  head_w_ = store_.create("head.w", {d, cfg_.vocab}, Init::Normal, rng, sd);
  head_b_ = store_.create("head.b", {cfg_.vocab}, Init::Zeros, rng);
}

Tensor<float> Forecaster::forward_logits(std::span<const std::vector<int>> batch) const {
  if (batch.empty()) throw Error(Errc::InvalidArgument, "forward_logits on an empty batch");
  const int n = static_cast<int>(batch.size());
  const int t = static_cast<int>(batch[0].size());
  if (t < 1) throw Error(Errc::InvalidArgument, "forward_logits on an empty sequence");
  if (t > cfg_.max_len)
    throw Error(Errc::ContextOverflow, "sequence length " + std::to_string(t) + " exceeds max_len " +
                                           std::to_string(cfg_.max_len));
  std::vector<int> idx, pos;
  idx.reserve(static_cast<std::size_t>(n) * t);
  pos.reserve(idx.capacity());
  for (const auto& row : batch) {
    if (static_cast<int>(row.size()) != t) throw Error(Errc::ShapeMismatch, "batch rows differ in length");
    for (int i = 0; i < t; ++i) {
      idx.push_back(row[i]);
      pos.push_back(i);
    }
  }
  const int d = cfg_.d_model;
  auto x = add(embedding(tok_emb_, idx), embedding(pos_emb_, pos));
  for (const auto& b : blocks_) {
    const auto h = layer_norm(x, b.ln1_g, b.ln1_b);
    const auto q = reshape(linear(h, b.wq, b.bq), {n, t, d});
    const auto k = reshape(linear(h, b.wk, b.bk), {n, t, d});
    const auto v = reshape(linear(h, b.wv, b.bv), {n, t, d});
    const auto a = reshape(attention(q, k, v, cfg_.heads, true), {n * t, d});
    x = add(x, linear(a, b.wo, b.bo));
    const auto h2 = layer_norm(x, b.ln2_g, b.ln2_b);
    x = add(x, linear(gelu(linear(h2, b.w1, b.b1)), b.w2, b.b2));
  }
  x = layer_norm(x, lnf_g_, lnf_b_);
  return linear(x, head_w_, head_b_);
}

Tensor<float> Forecaster::forward_logits(const std::vector<int>& tokens) const {
  return forward_logits(std::span<const std::vector<int>>(&tokens, 1));
}

void Forecaster::save(const std::filesystem::path& path) const {
  save_checkpoint(path, store_.export_tensors(kTag));
}

void Forecaster::load(const std::filesystem::path& path) {
  store_.import_tensors(load_checkpoint(path), kTag);
}

// ---- training ---------------------------------------------------------------

std::vector<int> shifted_targets(const std::vector<int>& tokens) {
  const int t = static_cast<int>(tokens.size());
  std::vector<int> out(t, -1);
  for (int i = kGridLen - 1; i + 1 < t; ++i) out[i] = tokens[i + 1];
  return out;
}

namespace {

std::vector<int> batch_targets(std::span<const std::vector<int>> batch) {
  std::vector<int> out;
  for (const auto& row : batch) {
    const auto t = shifted_targets(row);
    out.insert(out.end(), t.begin(), t.end());
  }
  return out;
}

/// (correct, counted) over rows with a target.
std::pair<std::size_t, std::size_t> count_correct(const Tensor<float>& logits, const std::vector<int>& targets) {
  const int v = logits.dim(1);
  std::size_t correct = 0, counted = 0;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    if (targets[r] < 0) continue;
    const float* row = logits.values().data() + r * v;
    const int arg = static_cast<int>(std::max_element(row, row + v) - row);
    correct += arg == targets[r];
    ++counted;
  }
  return {correct, counted};
}

}  // namespace

Tensor<float> sequence_loss(const Forecaster& model, std::span<const std::vector<int>> batch) {
  return cross_entropy(model.forward_logits(batch), batch_targets(batch));
}

double accuracy(const Forecaster& model, std::span<const TokenSequence> validation) {
  if (validation.empty()) throw Error(Errc::EmptyDataset, "accuracy over an empty set");
  NoGradGuard no_grad;
  std::size_t correct = 0, counted = 0;
  const std::size_t chunk = 32;
  for (std::size_t s = 0; s < validation.size(); s += chunk) {
    std::vector<std::vector<int>> rows;
    for (std::size_t i = s; i < std::min(validation.size(), s + chunk); ++i) rows.push_back(validation[i].tokens);
    // sequences of different lengths are evaluated one by one
    bool equal = std::all_of(rows.begin(), rows.end(), [&](const auto& r) { return r.size() == rows[0].size(); });
    if (!equal) {
      for (const auto& r : rows) {
        const auto [c, n] = count_correct(model.forward_logits(r), shifted_targets(r));
        correct += c;
        counted += n;
      }
      continue;
    }
    const auto [c, n] = count_correct(model.forward_logits(rows), batch_targets(rows));
    correct += c;
    counted += n;
  }
  if (counted == 0) throw Error(Errc::EmptyDataset, "no subsequent-frame positions to score");
  return 100.0 * static_cast<double>(correct) / static_cast<double>(counted);
}

TrainReport train_forecaster(Forecaster& model, std::span<const TokenSequence> train,
                             std::span<const TokenSequence> validation,
                             const std::function<void(const StepLog&)>& on_step,
                             const std::function<void(const EvalLog&)>& on_eval) {
  const auto& cfg = model.config();
  if (train.empty()) throw Error(Errc::EmptyDataset, "train_forecaster needs at least one sequence");
  const std::size_t len = train[0].tokens.size();
  for (const auto& s : train)
    if (s.tokens.size() != len || len % kGridLen != 0 || len < 2 * kGridLen)
      throw Error(Errc::RaggedCoverage, "training sequences must share a length of at least two frames");

  auto params = model.parameters().tensors();
  AdamState<float> adam;
  adam.lr = cfg.lr;
  Rng rng(cfg.seed ^ 0x6F7265636173ULL);
  const std::size_t n = train.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = n;
  const std::size_t batch = std::min<std::size_t>(cfg.batch, n);

  TrainReport report;
  auto evaluate = [&](int step) {
    if (validation.empty()) return;
    EvalLog e{step, accuracy(model, validation)};
    report.evals.push_back(e);
    if (on_eval) on_eval(e);
  };
  std::vector<std::vector<int>> rows(batch);
  for (int step = 1; step <= cfg.steps; ++step) {
    for (auto& r : rows) {
      if (cursor == n) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      r = train[order[cursor++]].tokens;
    }
    zero_grads<float>(params);
    const auto targets = batch_targets(rows);
    const auto logits = model.forward_logits(rows);
    const auto loss = cross_entropy(logits, targets);
    backward(loss);
    if (cfg.grad_clip > 0) clip_grad_norm<float>(params, cfg.grad_clip);
    adam_step<float>(params, adam);

    const auto [c, cnt] = count_correct(logits, targets);
    StepLog s{step, loss.item(), 100.0 * static_cast<double>(c) / static_cast<double>(cnt)};
    report.steps.push_back(s);
    if (on_step) on_step(s);
    if (cfg.eval_every > 0 && step % cfg.eval_every == 0 && step != cfg.steps) evaluate(step);
  }
  zero_grads<float>(params);
  evaluate(cfg.steps);
  report.final_accuracy = validation.empty() ? accuracy(model, train) : report.evals.back().accuracy;
  return report;
}

void write_training_log(const std::filesystem::path& path, const TrainReport& report) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(Errc::IoFailed, "cannot write " + path.string());
  char line[128];
  std::size_t e = 0;
  auto flush_evals = [&](int upto) {
    for (; e < report.evals.size() && report.evals[e].step <= upto; ++e) {
      std::snprintf(line, sizeof line, "eval %d acc %.6f\n", report.evals[e].step, report.evals[e].accuracy);
      out << line;
    }
  };
  for (const auto& s : report.steps) {
    std::snprintf(line, sizeof line, "step %d loss %.6f acc %.6f\n", s.step, s.loss, s.batch_accuracy);
    out << line;
    flush_evals(s.step);
  }
  flush_evals(std::numeric_limits<int>::max());
  if (!out) throw Error(Errc::IoFailed, "write failed for " + path.string());
}

// ---- cached inference -------------------------------------------------------

namespace {

using Mat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const Mat>;
using RowVec = Eigen::Matrix<float, 1, Eigen::Dynamic>;
using CRowMap = Eigen::Map<const RowVec>;

CMap as_mat(const Tensor<float>& t) { return CMap(t.values().data(), t.dim(0), t.dim(1)); }
CRowMap as_row(const Tensor<float>& t) { return CRowMap(t.values().data(), t.dim(0)); }

void layer_norm_rows(const Mat& x, const Tensor<float>& g, const Tensor<float>& b, Mat& out) {
  const int n = static_cast<int>(x.cols());
  out.resize(x.rows(), n);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const float* in = x.row(r).data();
    float mu = 0.0f;
    for (int j = 0; j < n; ++j) mu += in[j];
    mu /= n;
    float var = 0.0f;
    for (int j = 0; j < n; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= n;
    const float is = 1.0f / std::sqrt(var + 1e-5f);
    for (int j = 0; j < n; ++j) out(r, j) = (in[j] - mu) * is * g[j] + b[j];
  }
}

float gelu1(float v) {
  constexpr float c = 0.7978845608028654f, a = 0.044715f;
  return 0.5f * v * (1.0f + std::tanh(c * (v + a * v * v * v)));
}

/// Incremental decoder holding per-layer key/value rows for B sequences.
class CachedDecoder {
public:
  CachedDecoder(const Forecaster& m, int b) : m_(m), b_(b) {
    const auto& c = m.config();
    for (int l = 0; l < c.layers; ++l) {
      k_.emplace_back(Mat::Zero(static_cast<Eigen::Index>(b) * c.max_len, c.d_model));
      v_.emplace_back(Mat::Zero(static_cast<Eigen::Index>(b) * c.max_len, c.d_model));
    }
  }

  /// Feeds tokens[i] at position `pos` of sequence i; returns logits [B, vocab].
  Mat step(const std::vector<int>& tokens, int pos) {
    const auto& c = m_.config();
    const int d = c.d_model, heads = c.heads, dh = d / heads, maxl = c.max_len;
    if (pos >= maxl) throw Error(Errc::ContextOverflow, "decoder position exceeds max_len");
    Mat x(b_, d);
    const auto tok = as_mat(m_.token_embedding());
    const auto pe = as_mat(m_.position_embedding());
    for (int i = 0; i < b_; ++i) {
      if (tokens[i] < 0 || tokens[i] >= c.vocab)
        throw Error(Errc::OutOfVocabulary, "token " + std::to_string(tokens[i]) + " outside vocabulary");
      x.row(i) = tok.row(tokens[i]) + pe.row(pos);
    }
    Mat h, q, k, v, a(b_, d), f;
    const float sc = 1.0f / std::sqrt(static_cast<float>(dh));
    std::vector<float> s(pos + 1);
    for (std::size_t l = 0; l < m_.blocks().size(); ++l) {
      const auto& blk = m_.blocks()[l];
      layer_norm_rows(x, blk.ln1_g, blk.ln1_b, h);
      q = (h * as_mat(blk.wq)).rowwise() + as_row(blk.bq);
      k = (h * as_mat(blk.wk)).rowwise() + as_row(blk.bk);
      v = (h * as_mat(blk.wv)).rowwise() + as_row(blk.bv);
      for (int i = 0; i < b_; ++i) {
        k_[l].row(static_cast<Eigen::Index>(i) * maxl + pos) = k.row(i);
        v_[l].row(static_cast<Eigen::Index>(i) * maxl + pos) = v.row(i);
      }
      for (int i = 0; i < b_; ++i)
        for (int hh = 0; hh < heads; ++hh) {
          float mx = -std::numeric_limits<float>::infinity();
          for (int j = 0; j <= pos; ++j) {
            s[j] = nn::detail::ordered_dot(&q(i, hh * dh), &k_[l](static_cast<Eigen::Index>(i) * maxl + j, hh * dh), dh) * sc;
            mx = std::max(mx, s[j]);
          }
          float z = 0.0f;
          for (int j = 0; j <= pos; ++j) z += (s[j] = std::exp(s[j] - mx));
          auto out = a.row(i).segment(hh * dh, dh);
          out.setZero();
          for (int j = 0; j <= pos; ++j) out += (s[j] / z) * v_[l].row(static_cast<Eigen::Index>(i) * maxl + j).segment(hh * dh, dh);
        }
      x += (a * as_mat(blk.wo)).rowwise() + as_row(blk.bo);
      layer_norm_rows(x, blk.ln2_g, blk.ln2_b, h);
      f = (h * as_mat(blk.w1)).rowwise() + as_row(blk.b1);
      f = f.unaryExpr(&gelu1);
      x += (f * as_mat(blk.w2)).rowwise() + as_row(blk.b2);
    }
    layer_norm_rows(x, m_.final_gamma(), m_.final_beta(), h);
    Mat logits = (h * as_mat(m_.head_weight())).rowwise() + as_row(m_.head_bias());
    for (Eigen::Index i = 0; i < logits.size(); ++i)
      if (!std::isfinite(logits.data()[i])) throw Error(Errc::NonFinite, "non-finite logits during decoding");
    return logits;
  }

private:
  const Forecaster& m_;
  int b_;
  std::vector<Mat> k_, v_;
};

int argmax_row(const float* row, int v) {
  return static_cast<int>(std::max_element(row, row + v) - row);
}

int sample_row(const float* row, int v, double temperature, Rng& rng) {
  const double mx = *std::max_element(row, row + v);
  std::vector<double> p(v);
  double z = 0.0;
  for (int j = 0; j < v; ++j) z += (p[j] = std::exp((row[j] - mx) / temperature));
  std::uniform_real_distribution<double> u(0.0, z);
  double r = u(rng), acc = 0.0;
  for (int j = 0; j < v; ++j) {
    acc += p[j];
    if (r < acc) return j;
  }
  return v - 1;
}

}  // namespace

std::vector<TokenSequence> predict(const Forecaster& model, std::span<const LatentGrid> initial, int frame_count,
                                   const SamplerConfig& sampler, int first_location) {
  sampler.validate();
  const auto& c = model.config();
  if (frame_count < 1) throw Error(Errc::InvalidArgument, "predict needs frame_count >= 1");
  const int total = (frame_count + 1) * kGridLen;
  if (total > c.max_len)
    throw Error(Errc::ContextOverflow, std::to_string(frame_count + 1) + " frames need " + std::to_string(total) +
                                           " tokens, max_len is " + std::to_string(c.max_len));
  const int b = static_cast<int>(initial.size());
  std::vector<TokenSequence> out(b);
  if (b == 0) return out;
  std::vector<Rng> rngs;
  for (int i = 0; i < b; ++i) {
    out[i].location = first_location + i;
    out[i].tokens.assign(initial[i].begin(), initial[i].end());
    out[i].tokens.resize(total);
    std::seed_seq seq{static_cast<std::uint32_t>(sampler.rng_seed), static_cast<std::uint32_t>(sampler.rng_seed >> 32),
                      static_cast<std::uint32_t>(first_location + i)};
    rngs.emplace_back(seq);
  }
  CachedDecoder dec(model, b);
  std::vector<int> cur(b);
  for (int pos = 0; pos + 1 < total; ++pos) {
    for (int i = 0; i < b; ++i) cur[i] = out[i].tokens[pos];
    const Mat logits = dec.step(cur, pos);
    if (pos + 1 < kGridLen) continue;
    for (int i = 0; i < b; ++i) {
      const float* row = logits.row(i).data();
      out[i].tokens[pos + 1] = sampler.mode == SamplerConfig::Mode::Greedy
                                   ? argmax_row(row, c.vocab)
                                   : sample_row(row, c.vocab, sampler.temperature, rngs[i]);
    }
  }
  return out;
}

TokenSequence predict(const Forecaster& model, const LatentGrid& initial, int frame_count, const SamplerConfig& sampler) {
  return predict(model, std::span<const LatentGrid>(&initial, 1), frame_count, sampler)[0];
}

std::vector<float> cached_logits(const Forecaster& model, const std::vector<int>& tokens) {
  const int v = model.config().vocab;
  CachedDecoder dec(model, 1);
  std::vector<float> out;
  out.reserve(tokens.size() * v);
  for (std::size_t pos = 0; pos < tokens.size(); ++pos) {
    const Mat l = dec.step({tokens[pos]}, static_cast<int>(pos));
    out.insert(out.end(), l.data(), l.data() + v);
  }
  return out;
}

}  // namespace dyntex::forecaster
