#include "dyntex/nn/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "dyntex/error.hpp"
#include "dyntex/nn/autograd.hpp"
#include "reduce.hpp"

namespace dyntex::nn {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using CMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using CStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

template <typename T>
const std::vector<T>& val(const Node<T>& self, std::size_t i) {
  return self.inputs[i]->value;
}

void require(bool ok, const char* op, const std::string& msg) {
  if (!ok) throw Error(Errc::ShapeMismatch, std::string(op) + ": " + msg);
}

template <typename T>
void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require(a.shape() == b.shape(), op, shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace

// ---- elementwise -----------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_result<T>("add", a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k)
      if (T* g = input_grad(self, k))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_result<T>("sub", a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    if (T* g = input_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    if (T* g = input_grad(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_result<T>("mul", a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    const auto& av = val(self, 0);
    const auto& bv = val(self, 1);
    if (T* g = input_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
    if (T* g = input_grad(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  return make_result<T>("scale", a.shape(), std::move(out), {a}, [factor](Node<T>& self) {
    if (T* g = input_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  require(x.rank() >= 1 && bias.rank() == 1 && bias.dim(0) == x.dim(-1), "add_bias",
          shape_str(x.shape()) + " + " + shape_str(bias.shape()));
  const std::size_t n = bias.numel();
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + bias[i % n];
  return make_result<T>("add_bias", x.shape(), std::move(out), {x, bias}, [n](Node<T>& self) {
    if (T* g = input_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    if (T* g = input_grad(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % n] += self.grad[i];
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  return make_result<T>("relu", x.shape(), std::move(out), {x}, [](Node<T>& self) {
    const auto& xv = val(self, 0);
    if (T* g = input_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        if (xv[i] > T(0)) g[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  static constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  static constexpr T a = T(0.044715);
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  const Eigen::Map<const Arr> xv(x.values().data(), static_cast<Eigen::Index>(x.numel()));
  Arr th = (c * (xv + a * xv.cube())).tanh();
  std::vector<T> out(x.numel());
  Eigen::Map<Arr>(out.data(), xv.size()) = T(0.5) * xv * (T(1) + th);
  return make_result<T>("gelu", x.shape(), std::move(out), {x}, [th = std::move(th)](Node<T>& self) {
    if (T* g = input_grad(self, 0)) {
      const Eigen::Map<const Arr> xv(val(self, 0).data(), th.size());
      const Eigen::Map<const Arr> dy(self.grad.data(), th.size());
      Eigen::Map<Arr>(g, th.size()) +=
          dy * (T(0.5) * (T(1) + th) + T(0.5) * xv * (T(1) - th.square()) * c * (T(1) + T(3) * a * xv.square()));
    }
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = T(0);
  for (T v : a.values()) s += v;
  return make_result<T>("sum", {1}, {s}, {a}, [](Node<T>& self) {
    if (T* g = input_grad(self, 0)) {
      const std::size_t n = self.inputs[0]->value.size();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
    }
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  require(a.numel() > 0, "mean", "empty tensor");
  T s = T(0);
  for (T v : a.values()) s += v;
  const T inv = T(1) / static_cast<T>(a.numel());
  return make_result<T>("mean", {1}, {s * inv}, {a}, [inv](Node<T>& self) {
    if (T* g = input_grad(self, 0)) {
      const std::size_t n = self.inputs[0]->value.size();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0] * inv;
    }
  });
}

template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "mse");
  require(a.numel() > 0, "mse", "empty tensor");
  T s = T(0);
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const T d = a[i] - b[i];
    s += d * d;
  }
  const T inv = T(1) / static_cast<T>(a.numel());
  return make_result<T>("mse", {1}, {s * inv}, {a, b}, [inv](Node<T>& self) {
    const auto& av = val(self, 0);
    const auto& bv = val(self, 1);
    const T k = T(2) * inv * self.grad[0];
    if (T* g = input_grad(self, 0))
      for (std::size_t i = 0; i < av.size(); ++i) g[i] += k * (av[i] - bv[i]);
    if (T* g = input_grad(self, 1))
      for (std::size_t i = 0; i < av.size(); ++i) g[i] -= k * (av[i] - bv[i]);
  });
}

// ---- layout ----------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  require(numel(shape) == a.numel(), "reshape", shape_str(a.shape()) + " -> " + shape_str(shape));
  std::vector<T> out(a.values().begin(), a.values().end());
  return make_result<T>("reshape", std::move(shape), std::move(out), {a}, [](Node<T>& self) {
    if (T* g = input_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<int>& perm) {
  const int r = a.rank();
  require(static_cast<int>(perm.size()) == r, "permute", "permutation rank mismatch");
  std::vector<int> check(perm);
  std::sort(check.begin(), check.end());
  for (int i = 0; i < r; ++i) require(check[i] == i, "permute", "not a permutation");

  Shape out_shape(r);
  std::vector<std::size_t> in_stride(r, 1);
  for (int i = r - 2; i >= 0; --i) in_stride[i] = in_stride[i + 1] * a.dim(i + 1);
  for (int i = 0; i < r; ++i) out_shape[i] = a.dim(perm[i]);
  // map[j] = flat input index of flat output element j
  std::vector<std::size_t> map(a.numel());
  std::vector<int> idx(r, 0);
  for (std::size_t j = 0; j < map.size(); ++j) {
    std::size_t src = 0;
    for (int i = 0; i < r; ++i) src += idx[i] * in_stride[perm[i]];
    map[j] = src;
    for (int i = r - 1; i >= 0; --i) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  std::vector<T> out(a.numel());
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = a[map[j]];
  return make_result<T>("permute", std::move(out_shape), std::move(out), {a},
                        [map = std::move(map)](Node<T>& self) {
                          if (T* g = input_grad(self, 0))
                            for (std::size_t j = 0; j < map.size(); ++j) g[map[j]] += self.grad[j];
                        });
}

template <typename T>
Tensor<T> stop_gradient(const Tensor<T>& a) {
  return a.detach();
}

template <typename T>
Tensor<T> straight_through(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "straight_through");
  return make_result<T>("straight_through", a.shape(), std::vector<T>(b.values().begin(), b.values().end()), {a},
                        [](Node<T>& self) {
                          if (T* g = input_grad(self, 0))
                            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
                        });
}

// ---- linear algebra --------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0), "matmul",
          shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(static_cast<std::size_t>(m) * n);
  MatMap<T>(out.data(), m, n).noalias() = CMatMap<T>(a.values().data(), m, k) * CMatMap<T>(b.values().data(), k, n);
  return make_result<T>("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](Node<T>& self) {
    CMatMap<T> dy(self.grad.data(), m, n);
    if (T* g = input_grad(self, 0))
      MatMap<T>(g, m, k).noalias() += dy * CMatMap<T>(val(self, 1).data(), k, n).transpose();
    if (T* g = input_grad(self, 1))
      MatMap<T>(g, k, n).noalias() += CMatMap<T>(val(self, 0).data(), m, k).transpose() * dy;
  });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  require(x.rank() >= 1 && w.rank() == 2 && x.dim(-1) == w.dim(0), "linear",
          shape_str(x.shape()) + " x " + shape_str(w.shape()));
  const int in = w.dim(0), outd = w.dim(1);
  const bool has_bias = b.defined();
  if (has_bias) require(b.rank() == 1 && b.dim(0) == outd, "linear", "bias shape " + shape_str(b.shape()));
  const int m = static_cast<int>(x.numel() / in);
  std::vector<T> out(static_cast<std::size_t>(m) * outd);
  MatMap<T> y(out.data(), m, outd);
  y.noalias() = CMatMap<T>(x.values().data(), m, in) * CMatMap<T>(w.values().data(), in, outd);
  if (has_bias) y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.values().data(), outd);
  Shape shape = x.shape();
  shape.back() = outd;
  std::vector<Tensor<T>> inputs{x, w};
  if (has_bias) inputs.push_back(b);
  return make_result<T>("linear", std::move(shape), std::move(out), std::move(inputs),
                        [m, in, outd, has_bias](Node<T>& self) {
                          CMatMap<T> dy(self.grad.data(), m, outd);
                          if (T* g = input_grad(self, 0))
                            MatMap<T>(g, m, in).noalias() += dy * CMatMap<T>(val(self, 1).data(), in, outd).transpose();
                          if (T* g = input_grad(self, 1))
                            MatMap<T>(g, in, outd).noalias() += CMatMap<T>(val(self, 0).data(), m, in).transpose() * dy;
                          if (has_bias)
                            if (T* g = input_grad(self, 2)) {
                              std::vector<T> acc(outd, T(0));
                              for (int r = 0; r < m; ++r)
                                for (int c = 0; c < outd; ++c) acc[c] += dy(r, c);
                              for (int c = 0; c < outd; ++c) g[c] += acc[c];
                            }
                        });
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> indices) {
  require(table.rank() == 2, "embedding", "table must be [V,D]");
  const int vocab = table.dim(0), d = table.dim(1);
  std::vector<int> idx(indices.begin(), indices.end());
  std::vector<T> out(idx.size() * d);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= vocab)
      throw Error(Errc::OutOfVocabulary, "embedding index " + std::to_string(idx[i]) + " outside [0," +
                                             std::to_string(vocab) + ")");
    std::copy_n(table.values().data() + static_cast<std::size_t>(idx[i]) * d, d, out.data() + i * d);
  }
  const int n = static_cast<int>(idx.size());
  return make_result<T>("embedding", {n, d}, std::move(out), {table},
                        [idx = std::move(idx), d](Node<T>& self) {
                          if (T* g = input_grad(self, 0))
                            for (std::size_t i = 0; i < idx.size(); ++i)
                              for (int j = 0; j < d; ++j)
                                g[static_cast<std::size_t>(idx[i]) * d + j] += self.grad[i * d + j];
                        });
}

// ---- normalization / probabilities ----------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  require(x.rank() >= 1, "softmax", "rank 0");
  const int n = x.dim(-1);
  const std::size_t rows = x.numel() / n;
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.values().data() + r * n;
    T* o = out.data() + r * n;
    const T mx = *std::max_element(in, in + n);
    T s = T(0);
    for (int j = 0; j < n; ++j) s += (o[j] = std::exp(in[j] - mx));
    for (int j = 0; j < n; ++j) o[j] /= s;
  }
  return make_result<T>("softmax", x.shape(), out, {x}, [rows, n, y = out](Node<T>& self) {
    if (T* g = input_grad(self, 0)) {
      for (std::size_t r = 0; r < rows; ++r) {
        const T* yr = y.data() + r * n;
        const T* dy = self.grad.data() + r * n;
        T dot = T(0);
        for (int j = 0; j < n; ++j) dot += dy[j] * yr[j];
        for (int j = 0; j < n; ++j) g[r * n + j] += yr[j] * (dy[j] - dot);
      }
    }
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const int n = x.dim(-1);
  require(gamma.rank() == 1 && gamma.dim(0) == n && beta.rank() == 1 && beta.dim(0) == n, "layer_norm",
          "gamma/beta must be [" + std::to_string(n) + "]");
  const std::size_t rows = x.numel() / n;
  std::vector<T> out(x.numel()), xhat(x.numel()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.values().data() + r * n;
    T mu = T(0);
    for (int j = 0; j < n; ++j) mu += in[j];
    mu /= n;
    T var = T(0);
    for (int j = 0; j < n; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= n;
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (int j = 0; j < n; ++j) {
      const T h = (in[j] - mu) * is;
      xhat[r * n + j] = h;
      out[r * n + j] = h * gamma[j] + beta[j];
    }
  }
  return make_result<T>(
      "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [rows, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
        const auto& gv = val(self, 1);
        T* gx = input_grad(self, 0);
        T* gg = input_grad(self, 1);
        T* gb = input_grad(self, 2);
        std::vector<T> dh(n);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* dy = self.grad.data() + r * n;
          const T* h = xhat.data() + r * n;
          T mean_dh = T(0), mean_dh_h = T(0);
          for (int j = 0; j < n; ++j) {
            if (gg) gg[j] += dy[j] * h[j];
            if (gb) gb[j] += dy[j];
            dh[j] = dy[j] * gv[j];
            mean_dh += dh[j];
            mean_dh_h += dh[j] * h[j];
          }
          if (!gx) continue;
          mean_dh /= n;
          mean_dh_h /= n;
          for (int j = 0; j < n; ++j) gx[r * n + j] += inv_std[r] * (dh[j] - mean_dh - h[j] * mean_dh_h);
        }
      });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets) {
  require(logits.rank() == 2, "cross_entropy", "logits must be [M,V]");
  const int m = logits.dim(0), v = logits.dim(1);
  require(static_cast<int>(targets.size()) == m, "cross_entropy", "one target per row required");
  std::vector<int> tgt(targets.begin(), targets.end());
  std::vector<T> prob(logits.numel(), T(0));
  T total = T(0);
  int count = 0;
  for (int r = 0; r < m; ++r) {
    if (tgt[r] < 0) continue;
    if (tgt[r] >= v) throw Error(Errc::OutOfVocabulary, "target " + std::to_string(tgt[r]) + " >= vocab");
    const T* z = logits.values().data() + static_cast<std::size_t>(r) * v;
    T* p = prob.data() + static_cast<std::size_t>(r) * v;
    const T mx = *std::max_element(z, z + v);
    T s = T(0);
    for (int j = 0; j < v; ++j) s += (p[j] = std::exp(z[j] - mx));
    for (int j = 0; j < v; ++j) p[j] /= s;
    total += std::log(s) + mx - z[tgt[r]];
    ++count;
  }
  if (count == 0) throw Error(Errc::InvalidArgument, "cross_entropy: every target is ignored");
  const T inv = T(1) / count;
  return make_result<T>("cross_entropy", {1}, {total * inv}, {logits},
                        [m, v, inv, tgt = std::move(tgt), prob = std::move(prob)](Node<T>& self) {
                          T* g = input_grad(self, 0);
                          if (!g) return;
                          const T k = self.grad[0] * inv;
                          for (int r = 0; r < m; ++r) {
                            if (tgt[r] < 0) continue;
                            const std::size_t off = static_cast<std::size_t>(r) * v;
                            for (int j = 0; j < v; ++j) g[off + j] += k * prob[off + j];
                            g[off + tgt[r]] -= k;
                          }
                        });
}

// ---- convolution -----------------------------------------------------------

namespace {

struct ConvGeom {
  int n, c, h, w;  // image side
  int k, stride, pad;
  int oh, ow;  // column grid
};

// cols[(ch*k + ky)*k + kx, b*oh*ow + oy*ow + ox] = img[b, ch, oy*s - p + ky, ox*s - p + kx]
template <typename T>
void im2col(const T* img, const ConvGeom& g, T* cols) {
  const std::size_t ncols = static_cast<std::size_t>(g.n) * g.oh * g.ow;
  for (int ch = 0; ch < g.c; ++ch) {
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        T* row = cols + ((static_cast<std::size_t>(ch) * g.k + ky) * g.k + kx) * ncols;
        for (int b = 0; b < g.n; ++b) {
          const T* plane = img + (static_cast<std::size_t>(b) * g.c + ch) * g.h * g.w;
          for (int oy = 0; oy < g.oh; ++oy) {
            const int iy = oy * g.stride - g.pad + ky;
            T* dst = row + (static_cast<std::size_t>(b) * g.oh + oy) * g.ow;
            if (iy < 0 || iy >= g.h) {
              std::fill_n(dst, g.ow, T(0));
              continue;
            }
            for (int ox = 0; ox < g.ow; ++ox) {
              const int ix = ox * g.stride - g.pad + kx;
              dst[ox] = (ix >= 0 && ix < g.w) ? plane[static_cast<std::size_t>(iy) * g.w + ix] : T(0);
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-add columns back into the image.
template <typename T>
void col2im(const T* cols, const ConvGeom& g, T* img) {
  const std::size_t ncols = static_cast<std::size_t>(g.n) * g.oh * g.ow;
  for (int ch = 0; ch < g.c; ++ch) {
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        const T* row = cols + ((static_cast<std::size_t>(ch) * g.k + ky) * g.k + kx) * ncols;
        for (int b = 0; b < g.n; ++b) {
          T* plane = img + (static_cast<std::size_t>(b) * g.c + ch) * g.h * g.w;
          for (int oy = 0; oy < g.oh; ++oy) {
            const int iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= g.h) continue;
            const T* src = row + (static_cast<std::size_t>(b) * g.oh + oy) * g.ow;
            for (int ox = 0; ox < g.ow; ++ox) {
              const int ix = ox * g.stride - g.pad + kx;
              if (ix >= 0 && ix < g.w) plane[static_cast<std::size_t>(iy) * g.w + ix] += src[ox];
            }
          }
        }
      }
    }
  }
}

// [N, C, HW] <-> [C, N*HW]
template <typename T>
void nchw_to_cn(const T* src, int n, int c, int hw, T* dst) {
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      std::copy_n(src + (static_cast<std::size_t>(b) * c + ch) * hw, hw,
                  dst + (static_cast<std::size_t>(ch) * n + b) * hw);
}

template <typename T>
void cn_to_nchw_add(const T* src, int n, int c, int hw, T* dst) {
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch) {
      const T* s = src + (static_cast<std::size_t>(ch) * n + b) * hw;
      T* d = dst + (static_cast<std::size_t>(b) * c + ch) * hw;
      for (int i = 0; i < hw; ++i) d[i] += s[i];
    }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias, int stride, int padding) {
  if (stride <= 0) throw Error(Errc::InvalidArgument, "conv2d: stride must be positive");
  if (padding < 0) throw Error(Errc::InvalidArgument, "conv2d: padding must be non-negative");
  require(input.rank() == 4 && kernel.rank() == 4 && kernel.dim(1) == input.dim(1) && kernel.dim(2) == kernel.dim(3),
          "conv2d", shape_str(input.shape()) + " * " + shape_str(kernel.shape()));
  const int n = input.dim(0), ci = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int co = kernel.dim(0), k = kernel.dim(2);
  require(k <= h + 2 * padding && k <= w + 2 * padding, "conv2d", "kernel larger than padded input");
  const bool has_bias = bias.defined();
  if (has_bias) require(bias.rank() == 1 && bias.dim(0) == co, "conv2d", "bias shape");
  const ConvGeom g{n, ci, h, w, k, stride, padding, (h + 2 * padding - k) / stride + 1,
                   (w + 2 * padding - k) / stride + 1};
  const int hw = g.oh * g.ow;
  const int kk = ci * k * k;
  const int ncols = n * hw;

  std::vector<T> cols(static_cast<std::size_t>(kk) * ncols);
  im2col(input.values().data(), g, cols.data());
  std::vector<T> res(static_cast<std::size_t>(co) * ncols);
  MatMap<T>(res.data(), co, ncols).noalias() =
      CMatMap<T>(kernel.values().data(), co, kk) * CMatMap<T>(cols.data(), kk, ncols);
  std::vector<T> out(static_cast<std::size_t>(n) * co * hw, T(0));
  cn_to_nchw_add(res.data(), n, co, hw, out.data());
  if (has_bias)
    for (int b = 0; b < n; ++b)
      for (int ch = 0; ch < co; ++ch) {
        T* d = out.data() + (static_cast<std::size_t>(b) * co + ch) * hw;
        for (int i = 0; i < hw; ++i) d[i] += bias[ch];
      }

  std::vector<Tensor<T>> inputs{input, kernel};
  if (has_bias) inputs.push_back(bias);
  return make_result<T>(
      "conv2d", {n, co, g.oh, g.ow}, std::move(out), std::move(inputs),
      [g, co, kk, hw, ncols, has_bias, cols = std::move(cols)](Node<T>& self) {
        std::vector<T> dres(static_cast<std::size_t>(co) * ncols);
        nchw_to_cn(self.grad.data(), g.n, co, hw, dres.data());
        CMatMap<T> dy(dres.data(), co, ncols);
        if (T* gk = input_grad(self, 1))
          MatMap<T>(gk, co, kk).noalias() += dy * CMatMap<T>(cols.data(), kk, ncols).transpose();
        if (T* gx = input_grad(self, 0)) {
          std::vector<T> dcols(static_cast<std::size_t>(kk) * ncols);
          MatMap<T>(dcols.data(), kk, ncols).noalias() = CMatMap<T>(val(self, 1).data(), co, kk).transpose() * dy;
          col2im(dcols.data(), g, gx);
        }
        if (has_bias)
          if (T* gb = input_grad(self, 2))
            for (int ch = 0; ch < co; ++ch) gb[ch] += detail::ordered_sum(dy.data() + static_cast<std::size_t>(ch) * ncols, ncols);
      });
}

template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias, int stride,
                           int padding) {
  if (stride <= 0) throw Error(Errc::InvalidArgument, "conv_transpose2d: stride must be positive");
  if (padding < 0) throw Error(Errc::InvalidArgument, "conv_transpose2d: padding must be non-negative");
  require(input.rank() == 4 && kernel.rank() == 4 && kernel.dim(0) == input.dim(1) && kernel.dim(2) == kernel.dim(3),
          "conv_transpose2d", shape_str(input.shape()) + " * " + shape_str(kernel.shape()));
  const int n = input.dim(0), ci = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int co = kernel.dim(1), k = kernel.dim(2);
  const int oh = (h - 1) * stride - 2 * padding + k;
  const int ow = (w - 1) * stride - 2 * padding + k;
  require(oh > 0 && ow > 0, "conv_transpose2d", "empty output");
  const bool has_bias = bias.defined();
  if (has_bias) require(bias.rank() == 1 && bias.dim(0) == co, "conv_transpose2d", "bias shape");
  // Output image geometry; the column grid is the input's h x w.
  const ConvGeom g{n, co, oh, ow, k, stride, padding, h, w};
  const int hw = h * w;
  const int kk = co * k * k;
  const int ncols = n * hw;

  std::vector<T> xin(static_cast<std::size_t>(ci) * ncols);
  nchw_to_cn(input.values().data(), n, ci, hw, xin.data());
  std::vector<T> cols(static_cast<std::size_t>(kk) * ncols);
  MatMap<T>(cols.data(), kk, ncols).noalias() =
      CMatMap<T>(kernel.values().data(), ci, kk).transpose() * CMatMap<T>(xin.data(), ci, ncols);
  std::vector<T> out(static_cast<std::size_t>(n) * co * oh * ow, T(0));
  col2im(cols.data(), g, out.data());
  if (has_bias)
    for (int b = 0; b < n; ++b)
      for (int ch = 0; ch < co; ++ch) {
        T* d = out.data() + (static_cast<std::size_t>(b) * co + ch) * oh * ow;
        for (int i = 0; i < oh * ow; ++i) d[i] += bias[ch];
      }

  std::vector<Tensor<T>> inputs{input, kernel};
  if (has_bias) inputs.push_back(bias);
  return make_result<T>(
      "conv_transpose2d", {n, co, oh, ow}, std::move(out), std::move(inputs),
      [g, ci, co, kk, hw, ncols, has_bias, xin = std::move(xin)](Node<T>& self) {
        std::vector<T> dcols(static_cast<std::size_t>(kk) * ncols);
        im2col(self.grad.data(), g, dcols.data());
        CMatMap<T> dc(dcols.data(), kk, ncols);
        if (T* gk = input_grad(self, 1))
          MatMap<T>(gk, ci, kk).noalias() += CMatMap<T>(xin.data(), ci, ncols) * dc.transpose();
        if (T* gx = input_grad(self, 0)) {
          std::vector<T> dx(static_cast<std::size_t>(ci) * ncols);
          MatMap<T>(dx.data(), ci, ncols).noalias() = CMatMap<T>(val(self, 1).data(), ci, kk) * dc;
          cn_to_nchw_add(dx.data(), g.n, ci, hw, gx);
        }
        if (has_bias)
          if (T* gb = input_grad(self, 2)) {
            const std::size_t plane = static_cast<std::size_t>(g.h) * g.w;
            for (int b = 0; b < g.n; ++b)
              for (int ch = 0; ch < co; ++ch) {
                const T* d = self.grad.data() + (static_cast<std::size_t>(b) * co + ch) * plane;
                for (std::size_t i = 0; i < plane; ++i) gb[ch] += d[i];
              }
          }
      });
}

// ---- attention -------------------------------------------------------------

template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, int heads, bool causal) {
  require(q.rank() == 3, "attention", "expects [N,T,d]");
  require_same(q, k, "attention");
  require_same(q, v, "attention");
  const int n = q.dim(0), t = q.dim(1), d = q.dim(2);
  if (t < 1) throw Error(Errc::ShapeMismatch, "attention: empty sequence");
  if (heads < 1 || d % heads != 0)
    throw Error(Errc::ShapeMismatch, "attention: model width " + std::to_string(d) + " not divisible by " +
                                         std::to_string(heads) + " heads");
  const int dh = d / heads;
  const T sc = T(1) / std::sqrt(static_cast<T>(dh));
  const std::size_t seq = static_cast<std::size_t>(t) * d;
  const std::size_t tt = static_cast<std::size_t>(t) * t;

  std::vector<T> out(q.numel());
  std::vector<T> probs(static_cast<std::size_t>(n) * heads * tt);
  for (int b = 0; b < n; ++b) {
    for (int hd = 0; hd < heads; ++hd) {
      const std::size_t off = b * seq + static_cast<std::size_t>(hd) * dh;
      CStridedMap<T> qm(q.values().data() + off, t, dh, Eigen::OuterStride<>(d));
      CStridedMap<T> km(k.values().data() + off, t, dh, Eigen::OuterStride<>(d));
      CStridedMap<T> vm(v.values().data() + off, t, dh, Eigen::OuterStride<>(d));
      MatMap<T> p(probs.data() + (static_cast<std::size_t>(b) * heads + hd) * tt, t, t);
      p.noalias() = (qm * km.transpose()) * sc;
      for (int i = 0; i < t; ++i) {
        const int last = causal ? i : t - 1;
        T mx = p(i, 0);
        for (int j = 1; j <= last; ++j) mx = std::max(mx, p(i, j));
        T* row = &p(i, 0);
        T z = 0;
        for (int j = 0; j <= last; ++j) z += (row[j] = std::exp(row[j] - mx));
        for (int j = 0; j <= last; ++j) row[j] /= z;
        p.row(i).tail(t - 1 - last).setZero();
      }
      StridedMap<T>(out.data() + off, t, dh, Eigen::OuterStride<>(d)).noalias() = p * vm;
    }
  }
  return make_result<T>(
      "attention", q.shape(), std::move(out), {q, k, v},
      [n, t, d, dh, heads, sc, seq, tt, probs = std::move(probs)](Node<T>& self) {
        T* gq = input_grad(self, 0);
        T* gk = input_grad(self, 1);
        T* gv = input_grad(self, 2);
        RowMat<T> dp(t, t);
        for (int b = 0; b < n; ++b) {
          for (int hd = 0; hd < heads; ++hd) {
            const std::size_t off = b * seq + static_cast<std::size_t>(hd) * dh;
            const Eigen::OuterStride<> os(d);
            CStridedMap<T> qm(val(self, 0).data() + off, t, dh, os);
            CStridedMap<T> km(val(self, 1).data() + off, t, dh, os);
            CStridedMap<T> vm(val(self, 2).data() + off, t, dh, os);
            CStridedMap<T> dout(self.grad.data() + off, t, dh, os);
            CMatMap<T> p(probs.data() + (static_cast<std::size_t>(b) * heads + hd) * tt, t, t);
            if (gv) StridedMap<T>(gv + off, t, dh, os).noalias() += p.transpose() * dout;
            if (!gq && !gk) continue;
            dp.noalias() = dout * vm.transpose();
            // dS = P o (dP - rowsum(dP o P)); masked entries have P = 0.
            for (int i = 0; i < t; ++i) {
              const T dot = detail::ordered_dot(&dp(i, 0), p.data() + static_cast<std::size_t>(i) * t, t);
              dp.row(i).array() = p.row(i).array() * (dp.row(i).array() - dot) * sc;
            }
            if (gq) StridedMap<T>(gq + off, t, dh, os).noalias() += dp * km;
            if (gk) StridedMap<T>(gk + off, t, dh, os).noalias() += dp.transpose() * qm;
          }
        }
      });
}

#define DYNTEX_INSTANTIATE_OPS(T)                                                                        \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> scale(const Tensor<T>&, T);                                                        \
  template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> relu(const Tensor<T>&);                                                            \
  template Tensor<T> gelu(const Tensor<T>&);                                                            \
  template Tensor<T> sum(const Tensor<T>&);                                                             \
  template Tensor<T> mean(const Tensor<T>&);                                                            \
  template Tensor<T> mse(const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                  \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<int>&);                                \
  template Tensor<T> stop_gradient(const Tensor<T>&);                                                   \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                      \
  template Tensor<T> straight_through(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> embedding(const Tensor<T>&, std::span<const int>);                                 \
  template Tensor<T> softmax(const Tensor<T>&);                                                         \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);               \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const int>);                             \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);            \
  template Tensor<T> conv_transpose2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);  \
  template Tensor<T> attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, bool);

DYNTEX_INSTANTIATE_OPS(float)
DYNTEX_INSTANTIATE_OPS(double)

}  // namespace dyntex::nn
