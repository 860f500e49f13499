#include "m2m/nn/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <type_traits>

#include "m2m/core/error.hpp"

namespace m2m::nn {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

void require(bool ok, const std::string& what) {
  if (!ok) throw ContractError(what);
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require(a.shape() == b.shape(),
          std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

template <typename T>
void require_rank(const Tensor<T>& a, int rank, const char* op) {
  require(a.rank() == rank, std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                                shape_string(a.shape()));
}

// exp for the elementwise activations. The float version is a branch-free
// range reduction plus polynomial (within a few ulp of std::exp) that the
// compiler can vectorize; doubles keep std::exp for gradient checks.
template <typename T>
inline T fast_exp(T v) {
  if constexpr (std::is_same_v<T, double>) {
    return std::exp(v);
  } else {
    const float x = std::clamp(v, -87.0f, 88.0f);
    const float n = std::floor(x * 1.44269504f + 0.5f);
    const float r = x - n * 0.693359375f + n * 2.12194440e-4f;
    float p = 1.9875691500e-4f;
    p = p * r + 1.3981999507e-3f;
    p = p * r + 8.3334519073e-3f;
    p = p * r + 4.1665795894e-2f;
    p = p * r + 1.6666665459e-1f;
    p = p * r + 5.0000001201e-1f;
    const float e = p * r * r + r + 1.0f;
    return e * std::bit_cast<float>(static_cast<std::int32_t>(n + 127.0f) << 23);
  }
}

// Applies f(x) elementwise with derivative df(x, y).
template <typename T, typename F, typename DF>
Tensor<T> unary(const Tensor<T>& a, F f, DF df) {
  Tensor<T> r = make_result<T>(a.shape(), {a});
  const T* __restrict in = a.data().data();
  T* __restrict out = r.data().data();
  const std::size_t count = a.numel();
  for (std::size_t i = 0; i < count; ++i) out[i] = f(in[i]);
  if (r.requires_grad()) {
    Node<T>* o = r.node();
    Node<T>* pa = a.node();
    o->backward = [o, pa, df] {
      auto& ga = pa->grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o->grad[i] * df(pa->value[i], o->value[i]);
    };
  }
  return r;
}

template <typename T>
void im2col(const T* x, int channels, int height, int width, int k, T* cols) {
  const int pad = k / 2;
  const int n = height * width;
  for (int c = 0; c < channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* row = cols + static_cast<std::size_t>((c * k + ky) * k + kx) * n;
        const int x_lo = std::max(0, pad - kx);
        const int x_hi = std::min(width, width + pad - kx);
        for (int y = 0; y < height; ++y) {
          T* dst = row + static_cast<std::size_t>(y) * width;
          const int sy = y + ky - pad;
          if (sy < 0 || sy >= height) {
            std::fill(dst, dst + width, T(0));
            continue;
          }
          const T* src = x + (static_cast<std::size_t>(c) * height + sy) * width + (kx - pad);
          std::fill(dst, dst + x_lo, T(0));
          std::copy(src + x_lo, src + x_hi, dst + x_lo);
          std::fill(dst + x_hi, dst + width, T(0));
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, int channels, int height, int width, int k, T* dx) {
  const int pad = k / 2;
  const int n = height * width;
  for (int c = 0; c < channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* row = cols + static_cast<std::size_t>((c * k + ky) * k + kx) * n;
        const int x_lo = std::max(0, pad - kx);
        const int x_hi = std::min(width, width + pad - kx);
        for (int y = 0; y < height; ++y) {
          const int sy = y + ky - pad;
          if (sy < 0 || sy >= height) continue;
          const T* src = row + static_cast<std::size_t>(y) * width;
          T* dst = dx + (static_cast<std::size_t>(c) * height + sy) * width + (kx - pad);
          for (int xx = x_lo; xx < x_hi; ++xx) dst[xx] += src[xx];
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> r = make_result<T>(a.shape(), {a, b});
  auto x = a.data(), y = b.data(), out = r.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  if (r.requires_grad()) {
    Node<T>* o = r.node();
    Node<T>* pa = a.node();
    Node<T>* pb = b.node();
    o->backward = [o, pa, pb] {
      for (Node<T>* p : {pa, pb}) {
        if (!p->requires_grad) continue;
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i];
      }
    };
  }
  return r;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  Tensor<T> r = make_result<T>(a.shape(), {a, b});
  auto x = a.data(), y = b.data(), out = r.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  if (r.requires_grad()) {
    Node<T>* o = r.node();
    Node<T>* pa = a.node();
    Node<T>* pb = b.node();
    o->backward = [o, pa, pb] {
      if (pa->requires_grad) {
        auto& g = pa->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i] * pb->value[i];
      }
      if (pb->requires_grad) {
        auto& g = pb->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i] * pa->value[i];
      }
    };
  }
  return r;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  return unary<T>(a, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
  return unary<T>(
      a, [](T v) { return v / (T(1) + fast_exp(-v)); },
      [](T v, T) {
        const T s = T(1) / (T(1) + fast_exp(-v));
        return s * (T(1) + v * (T(1) - s));
      });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr T k = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T c = T(0.044715);
  return unary<T>(
      a, [](T v) { return T(0.5) * v * (T(1) + std::tanh(k * (v + c * v * v * v))); },
      [](T v, T) {
        const T th = std::tanh(k * (v + c * v * v * v));
        return T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * k * (T(1) + T(3) * c * v * v);
      });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return unary<T>(
      a, [](T v) { return T(1) / (T(1) + fast_exp(-v)); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return unary<T>(a, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  Tensor<T> r = make_result<T>({1}, {a});
  T acc = 0;
  for (T v : a.data()) acc += v;
  r.data()[0] = acc;
  if (r.requires_grad()) {
    Node<T>* o = r.node();
    Node<T>* pa = a.node();
    o->backward = [o, pa] {
      auto& g = pa->grad_buffer();
      for (auto& v : g) v += o->grad[0];
    };
  }
  return r;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

namespace {

// Very narrow layers (a handful of output channels at full resolution) are
// dominated by im2col and GEMM packing; a tap-by-tap loop is much cheaper.
constexpr int kDirectConvMaxOut = 8;

template <typename T>
void conv_direct(const T* x, const T* w, const T* bias, int cin, int cout, int height, int width, int k, T* out) {
  const int half = k / 2;
  const std::size_t n = static_cast<std::size_t>(height) * width;
  for (int co = 0; co < cout; ++co) {
    T* o = out + static_cast<std::size_t>(co) * n;
    std::fill(o, o + n, bias ? bias[co] : T(0));
    for (int ci = 0; ci < cin; ++ci) {
      const T* xc = x + static_cast<std::size_t>(ci) * n;
      const T* wk = w + (static_cast<std::size_t>(co) * cin + ci) * k * k;
      for (int dy = -half; dy <= half; ++dy) {
        for (int dx = -half; dx <= half; ++dx) {
          const T wv = wk[(dy + half) * k + dx + half];
          const int c0 = std::max(0, -dx), c1 = std::min(width, width - dx);
          for (int row = std::max(0, -dy); row < std::min(height, height - dy); ++row) {
            T* __restrict orow = o + static_cast<std::size_t>(row) * width;
            const T* __restrict irow = xc + static_cast<std::size_t>(row + dy) * width + dx;
            for (int col = c0; col < c1; ++col) orow[col] += wv * irow[col];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  require_rank(x, 4, "conv2d input");
  require_rank(w, 4, "conv2d weight");
  const int batch = x.dim(0), cin = x.dim(1), height = x.dim(2), width = x.dim(3);
  const int cout = w.dim(0), k = w.dim(2);
  require(w.dim(1) == cin, "conv2d: weight expects " + std::to_string(w.dim(1)) + " input channels, got " +
                               std::to_string(cin));
  require(k == w.dim(3) && k % 2 == 1, "conv2d: kernel must be odd and square");
  require(!b.defined() || static_cast<int>(b.numel()) == cout, "conv2d: bias size");
  const int kk = cin * k * k;
  const int n = height * width;

  Tensor<T> r = make_result<T>({batch, cout, height, width}, {x, w, b});
  ConstMapMat<T> wm(w.data().data(), cout, kk);
  const bool direct = cout <= kDirectConvMaxOut && k != 1;
  std::vector<T> cols(k == 1 || direct ? 0 : static_cast<std::size_t>(kk) * n);
  for (int bi = 0; bi < batch && direct; ++bi) {
    const T* xb = x.data().data() + static_cast<std::size_t>(bi) * cin * n;
    T* ob = r.data().data() + static_cast<std::size_t>(bi) * cout * n;
    conv_direct(xb, w.data().data(), b.defined() ? b.data().data() : nullptr, cin, cout, height, width, k, ob);
  }
  for (int bi = 0; bi < batch && !direct; ++bi) {
    const T* xb = x.data().data() + static_cast<std::size_t>(bi) * cin * n;
    const T* colp = xb;
    if (k != 1) {
      im2col(xb, cin, height, width, k, cols.data());
      colp = cols.data();
    }
    MapMat<T> out(r.data().data() + static_cast<std::size_t>(bi) * cout * n, cout, n);
    out.noalias() = wm * ConstMapMat<T>(colp, kk, n);
    if (b.defined()) {
      for (int c = 0; c < cout; ++c) out.row(c).array() += b.data()[static_cast<std::size_t>(c)];
    }
  }

  if (r.requires_grad()) {
    Node<T>* o = r.node();
    Node<T>* px = x.node();
    Node<T>* pw = w.node();
    Node<T>* pb = b.defined() ? b.node() : nullptr;
    o->backward = [=] {
      std::vector<T> col(k == 1 ? 0 : static_cast<std::size_t>(kk) * n);
      std::vector<T> dcol(static_cast<std::size_t>(kk) * n);
      ConstMapMat<T> wmat(pw->value.data(), cout, kk);
      for (int bi = 0; bi < batch; ++bi) {
        const T* xb = px->value.data() + static_cast<std::size_t>(bi) * cin * n;
        ConstMapMat<T> dout(o->grad.data() + static_cast<std::size_t>(bi) * cout * n, cout, n);
        if (pw->requires_grad) {
          const T* colp = xb;
          if (k != 1) {
            im2col(xb, cin, height, width, k, col.data());
            colp = col.data();
          }
          MapMat<T>(pw->grad_buffer().data(), cout, kk).noalias() += dout * ConstMapMat<T>(colp, kk, n).transpose();
        }
        if (pb && pb->requires_grad) {
          auto& gb = pb->grad_buffer();
          // Plain loops: Eigen's vectorized sum peels by address, which makes
          // rounding depend on where the buffer happens to live.
          for (int c = 0; c < cout; ++c) {
            T acc = T(0);
            for (int j = 0; j < n; ++j) acc += dout(c, j);
            gb[static_cast<std::size_t>(c)] += acc;
          }
        }
        if (px->requires_grad) {
          T* dxb = px->grad_buffer().data() + static_cast<std::size_t>(bi) * cin * n;
          if (k == 1) {
            MapMat<T>(dxb, cin, n).noalias() += wmat.transpose() * dout;
          } else {
            MapMat<T>(dcol.data(), kk, n).noalias() = wmat.transpose() * dout;
            col2im(dcol.data(), cin, height, width, k, dxb);
          }
        }
      }
    };
  }
  return r;
}

template <typename T>
Tensor<T> max_pool2(const Tensor<T>& x) {
  require_rank(x, 4, "max_pool2");
  const int batch = x.dim(0), ch = x.dim(1), height = x.dim(2), width = x.dim(3);
  require(height % 2 == 0 && width % 2 == 0, "max_pool2: odd spatial size " + shape_string(x.shape()));
  const int oh = height / 2, ow = width / 2;
  Tensor<T> r = make_result<T>({batch, ch, oh, ow}, {x});
  std::vector<std::uint32_t> argmax(r.numel());
  auto in = x.data();
  auto out = r.data();
  std::size_t o = 0;
  for (int bc = 0; bc < batch * ch; ++bc) {
    const std::size_t base = static_cast<std::size_t>(bc) * height * width;
    for (int y = 0; y < oh; ++y) {
      for (int xx = 0; xx < ow; ++xx, ++o) {
        std::size_t best = base + static_cast<std::size_t>(2 * y) * width + 2 * xx;
        for (std::size_t cand : {best + 1, best + width, best + width + 1}) {
          if (in[cand] > in[best]) best = cand;
        }
        out[o] = in[best];
        argmax[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  if (r.requires_grad()) {
    Node<T>* po = r.node();
    Node<T>* px = x.node();
    po->backward = [po, px, idx = std::move(argmax)] {
      auto& g = px->grad_buffer();
      for (std::size_t i = 0; i < idx.size(); ++i) g[idx[i]] += po->grad[i];
    };
  }
  return r;
}

template <typename T>
Tensor<T> upsample2(const Tensor<T>& x) {
  require_rank(x, 4, "upsample2");
  const int batch = x.dim(0), ch = x.dim(1), height = x.dim(2), width = x.dim(3);
  const int oh = 2 * height, ow = 2 * width;
  Tensor<T> r = make_result<T>({batch, ch, oh, ow}, {x});
  auto in = x.data();
  auto out = r.data();
  for (int bc = 0; bc < batch * ch; ++bc) {
    for (int y = 0; y < oh; ++y) {
      for (int xx = 0; xx < ow; ++xx) {
        out[(static_cast<std::size_t>(bc) * oh + y) * ow + xx] =
            in[(static_cast<std::size_t>(bc) * height + y / 2) * width + xx / 2];
      }
    }
  }
  if (r.requires_grad()) {
    Node<T>* o = r.node();
    Node<T>* px = x.node();
    o->backward = [=] {
      auto& g = px->grad_buffer();
      for (int bc = 0; bc < batch * ch; ++bc) {
        for (int y = 0; y < oh; ++y) {
          for (int xx = 0; xx < ow; ++xx) {
            g[(static_cast<std::size_t>(bc) * height + y / 2) * width + xx / 2] +=
                o->grad[(static_cast<std::size_t>(bc) * oh + y) * ow + xx];
          }
        }
      }
    };
  }
  return r;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 4, "concat_channels");
  require_rank(b, 4, "concat_channels");
  require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
          "concat_channels: mismatched " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
  const int batch = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  const std::size_t hw = static_cast<std::size_t>(a.dim(2)) * a.dim(3);
  Tensor<T> r = make_result<T>({batch, ca + cb, a.dim(2), a.dim(3)}, {a, b});
  auto out = r.data();
  for (int bi = 0; bi < batch; ++bi) {
    auto dst = out.begin() + static_cast<std::ptrdiff_t>(bi * (ca + cb) * hw);
    auto sa = a.data().begin() + static_cast<std::ptrdiff_t>(bi * ca * hw);
    auto sb = b.data().begin() + static_cast<std::ptrdiff_t>(bi * cb * hw);
    std::copy(sa, sa + static_cast<std::ptrdiff_t>(ca * hw), dst);
    std::copy(sb, sb + static_cast<std::ptrdiff_t>(cb * hw), dst + static_cast<std::ptrdiff_t>(ca * hw));
  }
  if (r.requires_grad()) {
    Node<T>* o = r.node();
    Node<T>* pa = a.node();
    Node<T>* pb = b.node();
    o->backward = [=] {
      for (int bi = 0; bi < batch; ++bi) {
        const T* src = o->grad.data() + static_cast<std::size_t>(bi) * (ca + cb) * hw;
        if (pa->requires_grad) {
          T* g = pa->grad_buffer().data() + static_cast<std::size_t>(bi) * ca * hw;
          for (std::size_t i = 0; i < ca * hw; ++i) g[i] += src[i];
        }
        if (pb->requires_grad) {
          T* g = pb->grad_buffer().data() + static_cast<std::size_t>(bi) * cb * hw;
          for (std::size_t i = 0; i < cb * hw; ++i) g[i] += src[ca * hw + i];
        }
      }
    };
  }
  return r;
}

template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, int groups, T eps) {
  require_rank(x, 4, "group_norm");
  const int batch = x.dim(0), ch = x.dim(1);
  require(groups > 0 && ch % groups == 0,
          "group_norm: " + std::to_string(ch) + " channels not divisible into " + std::to_string(groups) + " groups");
  const std::size_t m = static_cast<std::size_t>(ch / groups) * x.dim(2) * x.dim(3);
  Tensor<T> r = make_result<T>(x.shape(), {x});
  std::vector<T> inv_std(static_cast<std::size_t>(batch) * groups);
  auto in = x.data();
  auto out = r.data();
  for (std::size_t g = 0; g < inv_std.size(); ++g) {
    const T* src = in.data() + g * m;
    T mu = 0;
    for (std::size_t i = 0; i < m; ++i) mu += src[i];
    mu /= static_cast<T>(m);
    T var = 0;
    for (std::size_t i = 0; i < m; ++i) var += (src[i] - mu) * (src[i] - mu);
    var /= static_cast<T>(m);
    const T inv = T(1) / std::sqrt(var + eps);
    inv_std[g] = inv;
    for (std::size_t i = 0; i < m; ++i) out[g * m + i] = (src[i] - mu) * inv;
  }
  if (r.requires_grad()) {
    Node<T>* o = r.node();
    Node<T>* px = x.node();
    o->backward = [o, px, m, inv = std::move(inv_std)] {
      auto& gx = px->grad_buffer();
      for (std::size_t g = 0; g < inv.size(); ++g) {
        const T* dy = o->grad.data() + g * m;
        const T* xh = o->value.data() + g * m;
        T sdy = 0, sdyx = 0;
        for (std::size_t i = 0; i < m; ++i) {
          sdy += dy[i];
          sdyx += dy[i] * xh[i];
        }
        const T mm = static_cast<T>(m);
        for (std::size_t i = 0; i < m; ++i) gx[g * m + i] += inv[g] / mm * (mm * dy[i] - sdy - xh[i] * sdyx);
      }
    };
  }
  return r;
}

template <typename T>
Tensor<T> modulate(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias) {
  require_rank(x, 4, "modulate");
  const int batch = x.dim(0), ch = x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  const Shape want{batch, ch};
  require(gain.shape() == want && bias.shape() == want, "modulate: gain/bias must be " + shape_string(want));
  Tensor<T> r = make_result<T>(x.shape(), {x, gain, bias});
  auto in = x.data();
  auto out = r.data();
  for (std::size_t bc = 0; bc < static_cast<std::size_t>(batch) * ch; ++bc) {
    const T s = T(1) + gain.data()[bc];
    const T sh = bias.data()[bc];
    for (std::size_t i = 0; i < hw; ++i) out[bc * hw + i] = in[bc * hw + i] * s + sh;
  }
  if (r.requires_grad()) {
    Node<T>* o = r.node();
    Node<T>* px = x.node();
    Node<T>* pg = gain.node();
    Node<T>* pb = bias.node();
    o->backward = [=] {
      for (std::size_t bc = 0; bc < static_cast<std::size_t>(batch) * ch; ++bc) {
        const T* dy = o->grad.data() + bc * hw;
        const T* xv = px->value.data() + bc * hw;
        if (px->requires_grad) {
          T* gx = px->grad_buffer().data() + bc * hw;
          const T s = T(1) + pg->value[bc];
          for (std::size_t i = 0; i < hw; ++i) gx[i] += dy[i] * s;
        }
        if (pg->requires_grad) {
          T acc = 0;
          for (std::size_t i = 0; i < hw; ++i) acc += dy[i] * xv[i];
          pg->grad_buffer()[bc] += acc;
        }
        if (pb->requires_grad) {
          T acc = 0;
          for (std::size_t i = 0; i < hw; ++i) acc += dy[i];
          pb->grad_buffer()[bc] += acc;
        }
      }
    };
  }
  return r;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  require_rank(x, 2, "linear input");
  require_rank(w, 2, "linear weight");
  const int n = x.dim(0), in = x.dim(1), out = w.dim(0);
  require(w.dim(1) == in, "linear: weight " + shape_string(w.shape()) + " vs input " + shape_string(x.shape()));
  Tensor<T> r = make_result<T>({n, out}, {x, w, b});
  MapMat<T> y(r.data().data(), n, out);
  y.noalias() = ConstMapMat<T>(x.data().data(), n, in) * ConstMapMat<T>(w.data().data(), out, in).transpose();
  if (b.defined()) {
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < out; ++j) y(i, j) += b.data()[static_cast<std::size_t>(j)];
    }
  }
  if (r.requires_grad()) {
    Node<T>* o = r.node();
    Node<T>* px = x.node();
    Node<T>* pw = w.node();
    Node<T>* pb = b.defined() ? b.node() : nullptr;
    o->backward = [=] {
      ConstMapMat<T> dy(o->grad.data(), n, out);
      if (px->requires_grad) {
        MapMat<T>(px->grad_buffer().data(), n, in).noalias() += dy * ConstMapMat<T>(pw->value.data(), out, in);
      }
      if (pw->requires_grad) {
        MapMat<T>(pw->grad_buffer().data(), out, in).noalias() +=
            dy.transpose() * ConstMapMat<T>(px->value.data(), n, in);
      }
      if (pb && pb->requires_grad) {
        auto& gb = pb->grad_buffer();
        for (int j = 0; j < out; ++j) {
          T acc = T(0);
          for (int i = 0; i < n; ++i) acc += dy(i, j);
          gb[static_cast<std::size_t>(j)] += acc;
        }
      }
    };
  }
  return r;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  require_rank(x, 2, "layer_norm");
  const int n = x.dim(0), d = x.dim(1);
  require(static_cast<int>(gamma.numel()) == d && static_cast<int>(beta.numel()) == d, "layer_norm: affine size");
  Tensor<T> r = make_result<T>(x.shape(), {x, gamma, beta});
  std::vector<T> xhat(x.numel());
  std::vector<T> inv_std(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const T* src = x.data().data() + static_cast<std::size_t>(i) * d;
    T mu = 0;
    for (int j = 0; j < d; ++j) mu += src[j];
    mu /= static_cast<T>(d);
    T var = 0;
    for (int j = 0; j < d; ++j) var += (src[j] - mu) * (src[j] - mu);
    var /= static_cast<T>(d);
    const T inv = T(1) / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(i)] = inv;
    for (int j = 0; j < d; ++j) {
      const std::size_t k = static_cast<std::size_t>(i) * d + j;
      xhat[k] = (src[j] - mu) * inv;
      r.data()[k] = xhat[k] * gamma.data()[static_cast<std::size_t>(j)] + beta.data()[static_cast<std::size_t>(j)];
    }
  }
  if (r.requires_grad()) {
    Node<T>* o = r.node();
    Node<T>* px = x.node();
    Node<T>* pg = gamma.node();
    Node<T>* pb = beta.node();
    o->backward = [o, px, pg, pb, n, d, xh = std::move(xhat), inv = std::move(inv_std)] {
      std::vector<T> dxh(static_cast<std::size_t>(d));
      for (int i = 0; i < n; ++i) {
        const std::size_t row = static_cast<std::size_t>(i) * d;
        T s1 = 0, s2 = 0;
        for (int j = 0; j < d; ++j) {
          const T dy = o->grad[row + j];
          if (pg->requires_grad) pg->grad_buffer()[static_cast<std::size_t>(j)] += dy * xh[row + j];
          if (pb->requires_grad) pb->grad_buffer()[static_cast<std::size_t>(j)] += dy;
          dxh[static_cast<std::size_t>(j)] = dy * pg->value[static_cast<std::size_t>(j)];
          s1 += dxh[static_cast<std::size_t>(j)];
          s2 += dxh[static_cast<std::size_t>(j)] * xh[row + j];
        }
        if (!px->requires_grad) continue;
        auto& gx = px->grad_buffer();
        const T dd = static_cast<T>(d);
        for (int j = 0; j < d; ++j) {
          gx[row + j] += inv[static_cast<std::size_t>(i)] / dd * (dd * dxh[static_cast<std::size_t>(j)] - s1 - xh[row + j] * s2);
        }
      }
    };
  }
  return r;
}

template <typename T>
Tensor<T> to_tokens(const Tensor<T>& x) {
  require_rank(x, 4, "to_tokens");
  const int batch = x.dim(0), ch = x.dim(1);
  const int len = x.dim(2) * x.dim(3);
  Tensor<T> r = make_result<T>({batch * len, ch}, {x});
  auto in = x.data();
  auto out = r.data();
  for (int b = 0; b < batch; ++b) {
    for (int c = 0; c < ch; ++c) {
      for (int l = 0; l < len; ++l) {
        out[(static_cast<std::size_t>(b) * len + l) * ch + c] = in[(static_cast<std::size_t>(b) * ch + c) * len + l];
      }
    }
  }
  if (r.requires_grad()) {
    Node<T>* o = r.node();
    Node<T>* px = x.node();
    o->backward = [=] {
      auto& g = px->grad_buffer();
      for (int b = 0; b < batch; ++b) {
        for (int c = 0; c < ch; ++c) {
          for (int l = 0; l < len; ++l) {
            g[(static_cast<std::size_t>(b) * ch + c) * len + l] += o->grad[(static_cast<std::size_t>(b) * len + l) * ch + c];
          }
        }
      }
    };
  }
  return r;
}

template <typename T>
Tensor<T> from_tokens(const Tensor<T>& tokens, int batch, int height, int width) {
  require_rank(tokens, 2, "from_tokens");
  const int len = height * width;
  const int ch = tokens.dim(1);
  require(tokens.dim(0) == batch * len, "from_tokens: token count mismatch");
  Tensor<T> r = make_result<T>({batch, ch, height, width}, {tokens});
  auto in = tokens.data();
  auto out = r.data();
  for (int b = 0; b < batch; ++b) {
    for (int c = 0; c < ch; ++c) {
      for (int l = 0; l < len; ++l) {
        out[(static_cast<std::size_t>(b) * ch + c) * len + l] = in[(static_cast<std::size_t>(b) * len + l) * ch + c];
      }
    }
  }
  if (r.requires_grad()) {
    Node<T>* o = r.node();
    Node<T>* px = tokens.node();
    o->backward = [=] {
      auto& g = px->grad_buffer();
      for (int b = 0; b < batch; ++b) {
        for (int c = 0; c < ch; ++c) {
          for (int l = 0; l < len; ++l) {
            g[(static_cast<std::size_t>(b) * len + l) * ch + c] += o->grad[(static_cast<std::size_t>(b) * ch + c) * len + l];
          }
        }
      }
    };
  }
  return r;
}

namespace {

template <typename T>
void check_attention_args(const Tensor<T>& qkv, int batch, int length, int heads, const Tensor<T>& rel_bias) {
  require_rank(qkv, 2, "self_attention");
  require(qkv.dim(0) == batch * length, "self_attention: expected " + std::to_string(batch * length) + " tokens");
  require(qkv.dim(1) % 3 == 0 && (qkv.dim(1) / 3) % heads == 0, "self_attention: width not divisible by heads");
  require(rel_bias.shape() == Shape{heads, 2 * length - 1}, "self_attention: relative bias must be " +
                                                                shape_string({heads, 2 * length - 1}));
}

// Fills probs [L, L] for one (batch, head) pair.
template <typename T>
void attention_probs(const T* qkv, int length, int width, int dh, int head, const T* bias, RowMat<T>& probs) {
  const int stride = 3 * width;
  Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>> q(qkv + head * dh, length, dh, Eigen::OuterStride<>(stride));
  Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>> k(qkv + width + head * dh, length, dh,
                                                         Eigen::OuterStride<>(stride));
  probs.noalias() = q * k.transpose();
  const T sc = T(1) / std::sqrt(static_cast<T>(dh));
  for (int i = 0; i < length; ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    for (int j = 0; j < length; ++j) {
      probs(i, j) = probs(i, j) * sc + bias[i - j + length - 1];
      mx = std::max(mx, probs(i, j));
    }
    T z = 0;
    for (int j = 0; j < length; ++j) {
      probs(i, j) = std::exp(probs(i, j) - mx);
      z += probs(i, j);
    }
    for (int j = 0; j < length; ++j) probs(i, j) /= z;
  }
}

}  // namespace

template <typename T>
std::vector<T> attention_weights(const Tensor<T>& qkv, int batch, int length, int heads, const Tensor<T>& rel_bias) {
  check_attention_args(qkv, batch, length, heads, rel_bias);
  const int width = qkv.dim(1) / 3;
  const int dh = width / heads;
  std::vector<T> out(static_cast<std::size_t>(batch) * heads * length * length);
  RowMat<T> probs(length, length);
  for (int b = 0; b < batch; ++b) {
    for (int h = 0; h < heads; ++h) {
      attention_probs(qkv.data().data() + static_cast<std::size_t>(b) * length * 3 * width, length, width, dh, h,
                      rel_bias.data().data() + static_cast<std::size_t>(h) * (2 * length - 1), probs);
      std::copy(probs.data(), probs.data() + probs.size(),
                out.begin() + static_cast<std::ptrdiff_t>((b * heads + h) * length * length));
    }
  }
  return out;
}

template <typename T>
Tensor<T> self_attention(const Tensor<T>& qkv, int batch, int length, int heads, const Tensor<T>& rel_bias) {
  check_attention_args(qkv, batch, length, heads, rel_bias);
  const int width = qkv.dim(1) / 3;
  const int dh = width / heads;
  const int stride = 3 * width;
  Tensor<T> r = make_result<T>({batch * length, width}, {qkv, rel_bias});
  const bool keep = r.requires_grad();
  std::vector<T> saved(keep ? static_cast<std::size_t>(batch) * heads * length * length : 0);
  RowMat<T> probs(length, length);
  using Strided = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
  using StridedOut = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
  for (int b = 0; b < batch; ++b) {
    const T* base = qkv.data().data() + static_cast<std::size_t>(b) * length * stride;
    for (int h = 0; h < heads; ++h) {
      attention_probs(base, length, width, dh, h, rel_bias.data().data() + static_cast<std::size_t>(h) * (2 * length - 1),
                      probs);
      Strided v(base + 2 * width + h * dh, length, dh, Eigen::OuterStride<>(stride));
      StridedOut o(r.data().data() + static_cast<std::size_t>(b) * length * width + h * dh, length, dh,
                   Eigen::OuterStride<>(width));
      o.noalias() = probs * v;
      if (keep) {
        std::copy(probs.data(), probs.data() + probs.size(),
                  saved.begin() + static_cast<std::ptrdiff_t>((b * heads + h) * length * length));
      }
    }
  }
  if (keep) {
    Node<T>* po = r.node();
    Node<T>* pq = qkv.node();
    Node<T>* pbias = rel_bias.node();
    po->backward = [=, p_all = std::move(saved)] {
      const T sc = T(1) / std::sqrt(static_cast<T>(dh));
      RowMat<T> dp(length, length), ds(length, length);
      for (int b = 0; b < batch; ++b) {
        const T* base = pq->value.data() + static_cast<std::size_t>(b) * length * stride;
        T* gbase = pq->requires_grad ? pq->grad_buffer().data() + static_cast<std::size_t>(b) * length * stride : nullptr;
        for (int h = 0; h < heads; ++h) {
          Eigen::Map<const RowMat<T>> p(p_all.data() + static_cast<std::size_t>(b * heads + h) * length * length, length,
                                        length);
          Strided q(base + h * dh, length, dh, Eigen::OuterStride<>(stride));
          Strided k(base + width + h * dh, length, dh, Eigen::OuterStride<>(stride));
          Strided v(base + 2 * width + h * dh, length, dh, Eigen::OuterStride<>(stride));
          Strided dout(po->grad.data() + static_cast<std::size_t>(b) * length * width + h * dh, length, dh,
                       Eigen::OuterStride<>(width));
          dp.noalias() = dout * v.transpose();
          for (int i = 0; i < length; ++i) {
            T dot = 0;
            for (int j = 0; j < length; ++j) dot += dp(i, j) * p(i, j);
            for (int j = 0; j < length; ++j) ds(i, j) = p(i, j) * (dp(i, j) - dot);
          }
          if (pbias->requires_grad) {
            T* gb = pbias->grad_buffer().data() + static_cast<std::size_t>(h) * (2 * length - 1);
            for (int i = 0; i < length; ++i) {
              for (int j = 0; j < length; ++j) gb[i - j + length - 1] += ds(i, j);
            }
          }
          if (gbase) {
            StridedOut gq(gbase + h * dh, length, dh, Eigen::OuterStride<>(stride));
            StridedOut gk(gbase + width + h * dh, length, dh, Eigen::OuterStride<>(stride));
            StridedOut gv(gbase + 2 * width + h * dh, length, dh, Eigen::OuterStride<>(stride));
            gq.noalias() += sc * (ds * k);
            gk.noalias() += sc * (ds.transpose() * q);
            gv.noalias() += p.transpose() * dout;
          }
        }
      }
    };
  }
  return r;
}

template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mse");
  Tensor<T> r = make_result<T>({1}, {a, b});
  T acc = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const T d = a.data()[i] - b.data()[i];
    acc += d * d;
  }
  const T n = static_cast<T>(a.numel());
  r.data()[0] = acc / n;
  if (r.requires_grad()) {
    Node<T>* o = r.node();
    Node<T>* pa = a.node();
    Node<T>* pb = b.node();
    o->backward = [o, pa, pb, n] {
      const T g0 = o->grad[0] * T(2) / n;
      if (pa->requires_grad) {
        auto& g = pa->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += g0 * (pa->value[i] - pb->value[i]);
      }
      if (pb->requires_grad) {
        auto& g = pb->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= g0 * (pa->value[i] - pb->value[i]);
      }
    };
  }
  return r;
}

template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const std::vector<T>& target, const std::vector<T>& weight,
                          T normalizer) {
  require(target.size() == logits.numel() && weight.size() == logits.numel(), "bce_with_logits: size mismatch");
  require(normalizer > T(0), "bce_with_logits: normalizer must be positive");
  Tensor<T> r = make_result<T>({1}, {logits});
  T acc = 0;
  auto z = logits.data();
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (weight[i] == T(0)) continue;
    acc += weight[i] * (std::max(z[i], T(0)) - z[i] * target[i] + std::log1p(std::exp(-std::abs(z[i]))));
  }
  r.data()[0] = acc / normalizer;
  if (r.requires_grad()) {
    Node<T>* o = r.node();
    Node<T>* pz = logits.node();
    o->backward = [o, pz, target, weight, normalizer] {
      auto& g = pz->grad_buffer();
      const T g0 = o->grad[0] / normalizer;
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (weight[i] == T(0)) continue;
        const T s = T(1) / (T(1) + std::exp(-pz->value[i]));
        g[i] += g0 * weight[i] * (s - target[i]);
      }
    };
  }
  return r;
}

template <typename T>
Tensor<T> kl_standard_normal(const Tensor<T>& mu, const Tensor<T>& logvar) {
  require_same_shape(mu, logvar, "kl_standard_normal");
  Tensor<T> r = make_result<T>({1}, {mu, logvar});
  T acc = 0;
  for (std::size_t i = 0; i < mu.numel(); ++i) {
    const T m = mu.data()[i], lv = logvar.data()[i];
    acc += T(0.5) * (std::exp(lv) + m * m - T(1) - lv);
  }
  const T n = static_cast<T>(mu.numel());
  r.data()[0] = acc / n;
  if (r.requires_grad()) {
    Node<T>* o = r.node();
    Node<T>* pm = mu.node();
    Node<T>* pl = logvar.node();
    o->backward = [o, pm, pl, n] {
      const T g0 = o->grad[0] / n;
      if (pm->requires_grad) {
        auto& g = pm->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += g0 * pm->value[i];
      }
      if (pl->requires_grad) {
        auto& g = pl->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += g0 * T(0.5) * (std::exp(pl->value[i]) - T(1));
      }
    };
  }
  return r;
}

#define M2M_INSTANTIATE_OPS(T)                                                                             \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> scale(const Tensor<T>&, T);                                                          \
  template Tensor<T> silu(const Tensor<T>&);                                                              \
  template Tensor<T> gelu(const Tensor<T>&);                                                              \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                           \
  template Tensor<T> exp(const Tensor<T>&);                                                               \
  template Tensor<T> sum(const Tensor<T>&);                                                               \
  template Tensor<T> mean(const Tensor<T>&);                                                              \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> max_pool2(const Tensor<T>&);                                                         \
  template Tensor<T> upsample2(const Tensor<T>&);                                                         \
  template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> group_norm(const Tensor<T>&, int, T);                                                \
  template Tensor<T> modulate(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                      \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);                 \
  template Tensor<T> to_tokens(const Tensor<T>&);                                                         \
  template Tensor<T> from_tokens(const Tensor<T>&, int, int, int);                                        \
  template Tensor<T> self_attention(const Tensor<T>&, int, int, int, const Tensor<T>&);                   \
  template std::vector<T> attention_weights(const Tensor<T>&, int, int, int, const Tensor<T>&);           \
  template Tensor<T> mse(const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> bce_with_logits(const Tensor<T>&, const std::vector<T>&, const std::vector<T>&, T);   \
  template Tensor<T> kl_standard_normal(const Tensor<T>&, const Tensor<T>&);

M2M_INSTANTIATE_OPS(float)
M2M_INSTANTIATE_OPS(double)

}  // namespace m2m::nn
