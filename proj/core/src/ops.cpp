#include "lbba/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "lbba/errors.hpp"

namespace lbba {
inline namespace LBBA_PRECISION_NS {

namespace {

using MatRM = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;
using VecMap = Eigen::Map<Eigen::Matrix<real, Eigen::Dynamic, 1>>;
using CVecMap = Eigen::Map<const Eigen::Matrix<real, Eigen::Dynamic, 1>>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_rank(const Tensor& t, size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_str(t.shape()));
  }
}

std::span<real> gbuf(const Tensor& t) { return detail::grad_buffer(*t.impl()); }

int64_t rows_of(const Tensor& t) {
  if (t.rank() < 1) throw DimensionError("expected a batch dimension");
  return t.dim(0);
}

// Column buffer for one sample and one group: (C*KH*KW, HO*WO).
void im2col(const real* x, int64_t c, int64_t h, int64_t w, int64_t kh, int64_t kw,
            int64_t stride, int64_t pad, int64_t ho, int64_t wo, real* col) {
  for (int64_t ci = 0; ci < c; ++ci) {
    for (int64_t ki = 0; ki < kh; ++ki) {
      for (int64_t kj = 0; kj < kw; ++kj) {
        real* row = col + ((ci * kh + ki) * kw + kj) * ho * wo;
        for (int64_t oi = 0; oi < ho; ++oi) {
          const int64_t ii = oi * stride - pad + ki;
          if (ii < 0 || ii >= h) {
            std::fill(row + oi * wo, row + (oi + 1) * wo, 0.0f);
            continue;
          }
          const real* xrow = x + (ci * h + ii) * w;
          for (int64_t oj = 0; oj < wo; ++oj) {
            const int64_t jj = oj * stride - pad + kj;
            row[oi * wo + oj] = (jj >= 0 && jj < w) ? xrow[jj] : 0.0f;
          }
        }
      }
    }
  }
}

void col2im(const real* col, int64_t c, int64_t h, int64_t w, int64_t kh, int64_t kw,
            int64_t stride, int64_t pad, int64_t ho, int64_t wo, real* x) {
  for (int64_t ci = 0; ci < c; ++ci) {
    for (int64_t ki = 0; ki < kh; ++ki) {
      for (int64_t kj = 0; kj < kw; ++kj) {
        const real* row = col + ((ci * kh + ki) * kw + kj) * ho * wo;
        for (int64_t oi = 0; oi < ho; ++oi) {
          const int64_t ii = oi * stride - pad + ki;
          if (ii < 0 || ii >= h) continue;
          real* xrow = x + (ci * h + ii) * w;
          for (int64_t oj = 0; oj < wo; ++oj) {
            const int64_t jj = oj * stride - pad + kj;
            if (jj >= 0 && jj < w) xrow[jj] += row[oi * wo + oj];
          }
        }
      }
    }
  }
}

struct ConvGeometry {
  int64_t n, c, h, w, o, cg, og, kh, kw, ho, wo, groups, stride, pad;
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

ConvGeometry conv_geometry(const Tensor& x, const Tensor& weight, Conv2dOptions opt) {
  require_rank(x, 4, "conv2d input");
  require_rank(weight, 4, "conv2d weight");
  if (opt.stride < 1 || opt.padding < 0 || opt.groups < 1) {
    throw DimensionError("conv2d: invalid stride/padding/groups");
  }
  ConvGeometry g{};
  g.n = x.dim(0);
  g.c = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.o = weight.dim(0);
  g.groups = opt.groups;
  g.stride = opt.stride;
  g.pad = opt.padding;
  if (g.c % g.groups != 0 || g.o % g.groups != 0) {
    throw DimensionError("conv2d: channels not divisible by groups");
  }
  g.cg = g.c / g.groups;
  g.og = g.o / g.groups;
  if (weight.dim(1) != g.cg) {
    throw DimensionError("conv2d: weight input channels " + std::to_string(weight.dim(1)) +
                         " do not match input channels " + std::to_string(g.cg) + " per group");
  }
  g.kh = weight.dim(2);
  g.kw = weight.dim(3);
  const int64_t hspan = g.h + 2 * g.pad - g.kh;
  const int64_t wspan = g.w + 2 * g.pad - g.kw;
  if (hspan < 0 || wspan < 0) {
    throw DimensionError("conv2d: kernel " + shape_str(weight.shape()) + " larger than padded input " +
                         shape_str(x.shape()));
  }
  g.ho = hspan / g.stride + 1;
  g.wo = wspan / g.stride + 1;
  return g;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  detail::record(out, "add", {a, b}, [a, b](std::span<const real> g) {
    for (const auto* t : {&a, &b}) {
      if (!t->requires_grad()) continue;
      auto gt = gbuf(*t);
      for (size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
    }
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out(a.shape());
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (size_t i = 0; i < o.size(); ++i) o[i] = x[i] - y[i];
  detail::record(out, "sub", {a, b}, [a, b](std::span<const real> g) {
    if (a.requires_grad()) {
      auto ga = gbuf(a);
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto gb = gbuf(b);
      for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
  detail::record(out, "mul", {a, b}, [a, b](std::span<const real> g) {
    auto x = a.data();
    auto y = b.data();
    if (a.requires_grad()) {
      auto ga = gbuf(a);
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
    }
    if (b.requires_grad()) {
      auto gb = gbuf(b);
      for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
    }
  });
  return out;
}

Tensor scale(const Tensor& a, real s) {
  Tensor out(a.shape());
  auto o = out.data();
  auto x = a.data();
  for (size_t i = 0; i < o.size(); ++i) o[i] = x[i] * s;
  detail::record(out, "scale", {a}, [a, s](std::span<const real> g) {
    auto ga = gbuf(a);
    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
  });
  return out;
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (real v : a.data()) acc += v;
  Tensor out = Tensor::scalar(static_cast<real>(acc));
  detail::record(out, "sum", {a}, [a](std::span<const real> g) {
    auto ga = gbuf(a);
    for (auto& v : ga) v += g[0];
  });
  return out;
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(a), 1.0f / static_cast<real>(a.numel()));
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  Tensor out(std::move(shape), std::vector<real>(a.data().begin(), a.data().end()));
  detail::record(out, "reshape", {a}, [a](std::span<const real> g) {
    auto ga = gbuf(a);
    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
  return out;
}

Tensor flatten(const Tensor& a) {
  const auto n = rows_of(a);
  return reshape(a, {n, n ? a.numel() / n : 0});
}

Tensor relu(const Tensor& x) {
  Tensor out(x.shape());
  auto o = out.data();
  auto in = x.data();
  for (size_t i = 0; i < o.size(); ++i) o[i] = (in[i] > 0.0f || std::isnan(in[i])) ? in[i] : 0.0f;
  // Subgradient at exactly 0 is 0.
  detail::record(out, "relu", {x}, [x](std::span<const real> g) {
    auto gx = gbuf(x);
    auto in = x.data();
    for (size_t i = 0; i < g.size(); ++i) {
      if (in[i] > 0.0f) gx[i] += g[i];
    }
  });
  return out;
}

Tensor sigmoid(const Tensor& x) {
  Tensor out(x.shape());
  auto o = out.data();
  auto in = x.data();
  for (size_t i = 0; i < o.size(); ++i) o[i] = 1.0f / (1.0f + std::exp(-in[i]));
  std::weak_ptr<detail::TensorImpl> wout = out.impl();
  detail::record(out, "sigmoid", {x}, [x, wout](std::span<const real> g) {
    auto y = wout.lock();
    auto gx = gbuf(x);
    for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y->data[i] * (1.0f - y->data[i]);
  });
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
  require_rank(a, 2, "matmul lhs");
  require_rank(b, 2, "matmul rhs");
  const int64_t m = a.dim(0), k = a.dim(1);
  const int64_t n = transpose_b ? b.dim(0) : b.dim(1);
  const int64_t kb = transpose_b ? b.dim(1) : b.dim(0);
  if (k != kb) {
    throw DimensionError("matmul: inner dims differ " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  Tensor out({m, n});
  CMapRM A(a.ptr(), m, k);
  MapRM C(out.ptr(), m, n);
  if (transpose_b) {
    C.noalias() = A * CMapRM(b.ptr(), n, k).transpose();
  } else {
    C.noalias() = A * CMapRM(b.ptr(), k, n);
  }
  detail::record(out, "matmul", {a, b}, [a, b, m, n, k, transpose_b](std::span<const real> g) {
    CMapRM G(g.data(), m, n);
    if (a.requires_grad()) {
      MapRM GA(gbuf(a).data(), m, k);
      if (transpose_b) {
        GA.noalias() += G * CMapRM(b.ptr(), n, k);
      } else {
        GA.noalias() += G * CMapRM(b.ptr(), k, n).transpose();
      }
    }
    if (b.requires_grad()) {
      CMapRM A(a.ptr(), m, k);
      if (transpose_b) {
        MapRM GB(gbuf(b).data(), n, k);
        GB.noalias() += G.transpose() * A;
      } else {
        MapRM GB(gbuf(b).data(), k, n);
        GB.noalias() += A.transpose() * G;
      }
    }
  });
  return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank(x, 2, "linear input");
  require_rank(weight, 2, "linear weight");
  const int64_t n = x.dim(0), in = x.dim(1), outf = weight.dim(0);
  if (weight.dim(1) != in) {
    throw DimensionError("linear: weight " + shape_str(weight.shape()) + " vs input " +
                         shape_str(x.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != outf)) {
    throw DimensionError("linear: bias shape " + shape_str(bias.shape()));
  }
  Tensor out({n, outf});
  MapRM Y(out.ptr(), n, outf);
  Y.noalias() = CMapRM(x.ptr(), n, in) * CMapRM(weight.ptr(), outf, in).transpose();
  if (bias.defined()) Y.rowwise() += Eigen::Map<const Eigen::Matrix<real, 1, Eigen::Dynamic>>(bias.ptr(), outf);
  detail::record(out, "linear", {x, weight, bias},
                 [x, weight, bias, n, in, outf](std::span<const real> g) {
                   CMapRM G(g.data(), n, outf);
                   if (x.requires_grad()) {
                     MapRM GX(gbuf(x).data(), n, in);
                     GX.noalias() += G * CMapRM(weight.ptr(), outf, in);
                   }
                   if (weight.requires_grad()) {
                     MapRM GW(gbuf(weight).data(), outf, in);
                     GW.noalias() += G.transpose() * CMapRM(x.ptr(), n, in);
                   }
                   if (bias.defined() && bias.requires_grad()) {
                     Eigen::Map<Eigen::Matrix<real, 1, Eigen::Dynamic>> GB(gbuf(bias).data(), outf);
                     GB += G.colwise().sum();
                   }
                 });
  return out;
}

Tensor conv2d(const Tensor& x, const Tensor& weight, Conv2dOptions opt) {
  const auto g = conv_geometry(x, weight, opt);
  Tensor out({g.n, g.o, g.ho, g.wo});
  const int64_t kdim = g.cg * g.kh * g.kw;
  const int64_t pix = g.ho * g.wo;
  std::vector<real> col(g.pointwise() ? 0 : static_cast<size_t>(kdim * pix));
  for (int64_t s = 0; s < g.n; ++s) {
    for (int64_t gi = 0; gi < g.groups; ++gi) {
      const real* xs = x.ptr() + ((s * g.c) + gi * g.cg) * g.h * g.w;
      const real* colp = xs;
      if (!g.pointwise()) {
        im2col(xs, g.cg, g.h, g.w, g.kh, g.kw, g.stride, g.pad, g.ho, g.wo, col.data());
        colp = col.data();
      }
      MapRM O(out.ptr() + ((s * g.o) + gi * g.og) * pix, g.og, pix);
      O.noalias() = CMapRM(weight.ptr() + gi * g.og * kdim, g.og, kdim) * CMapRM(colp, kdim, pix);
    }
  }
  detail::record(out, "conv2d", {x, weight}, [x, weight, g](std::span<const real> gout) {
    const int64_t kdim = g.cg * g.kh * g.kw;
    const int64_t pix = g.ho * g.wo;
    std::vector<real> col(g.pointwise() ? 0 : static_cast<size_t>(kdim * pix));
    std::vector<real> dcol(static_cast<size_t>(kdim * pix));
    real* gx = x.requires_grad() ? gbuf(x).data() : nullptr;
    real* gw = weight.requires_grad() ? gbuf(weight).data() : nullptr;
    for (int64_t s = 0; s < g.n; ++s) {
      for (int64_t gi = 0; gi < g.groups; ++gi) {
        CMapRM G(gout.data() + ((s * g.o) + gi * g.og) * pix, g.og, pix);
        const int64_t xoff = ((s * g.c) + gi * g.cg) * g.h * g.w;
        if (gw) {
          const real* colp = x.ptr() + xoff;
          if (!g.pointwise()) {
            im2col(colp, g.cg, g.h, g.w, g.kh, g.kw, g.stride, g.pad, g.ho, g.wo, col.data());
            colp = col.data();
          }
          MapRM GW(gw + gi * g.og * kdim, g.og, kdim);
          GW.noalias() += G * CMapRM(colp, kdim, pix).transpose();
        }
        if (gx) {
          CMapRM W(weight.ptr() + gi * g.og * kdim, g.og, kdim);
          if (g.pointwise()) {
            MapRM GX(gx + xoff, kdim, pix);
            GX.noalias() += W.transpose() * G;
          } else {
            MapRM DC(dcol.data(), kdim, pix);
            DC.noalias() = W.transpose() * G;
            col2im(dcol.data(), g.cg, g.h, g.w, g.kh, g.kw, g.stride, g.pad, g.ho, g.wo, gx + xoff);
          }
        }
      }
    }
  });
  return out;
}

Tensor conv2d_reference(const Tensor& x, const Tensor& weight, Conv2dOptions opt) {
  const auto g = conv_geometry(x, weight, opt);
  Tensor out({g.n, g.o, g.ho, g.wo});
  auto o = out.data();
  auto in = x.data();
  auto w = weight.data();
  for (int64_t s = 0; s < g.n; ++s)
    for (int64_t oc = 0; oc < g.o; ++oc) {
      const int64_t grp = oc / g.og;
      for (int64_t oi = 0; oi < g.ho; ++oi)
        for (int64_t oj = 0; oj < g.wo; ++oj) {
          double acc = 0.0;
          for (int64_t ci = 0; ci < g.cg; ++ci)
            for (int64_t ki = 0; ki < g.kh; ++ki)
              for (int64_t kj = 0; kj < g.kw; ++kj) {
                const int64_t ii = oi * g.stride - g.pad + ki;
                const int64_t jj = oj * g.stride - g.pad + kj;
                if (ii < 0 || ii >= g.h || jj < 0 || jj >= g.w) continue;
                const int64_t c = grp * g.cg + ci;
                acc += static_cast<double>(in[((s * g.c + c) * g.h + ii) * g.w + jj]) *
                       w[((oc * g.cg + ci) * g.kh + ki) * g.kw + kj];
              }
          o[((s * g.o + oc) * g.ho + oi) * g.wo + oj] = static_cast<real>(acc);
        }
    }
  return out;
}

Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    Tensor& running_mean, Tensor& running_var, bool training, real momentum,
                    real eps) {
  require_rank(x, 4, "batch_norm2d");
  const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  for (const Tensor* t : std::initializer_list<const Tensor*>{&gamma, &beta, &running_mean, &running_var}) {
    if (t->numel() != c) throw DimensionError("batch_norm2d: per-channel tensor size mismatch");
  }
  const int64_t m = n * hw;
  std::vector<real> mu(c), invstd(c);
  auto in = x.data();
  if (training) {
    if (m < 1) throw DimensionError("batch_norm2d: empty batch");
    auto rm = running_mean.data();
    auto rv = running_var.data();
    for (int64_t ch = 0; ch < c; ++ch) {
      double s = 0.0, ss = 0.0;
      for (int64_t b = 0; b < n; ++b) {
        const real* p = in.data() + (b * c + ch) * hw;
        for (int64_t i = 0; i < hw; ++i) s += p[i];
      }
      const double mean_d = s / static_cast<double>(m);
      for (int64_t b = 0; b < n; ++b) {
        const real* p = in.data() + (b * c + ch) * hw;
        for (int64_t i = 0; i < hw; ++i) {
          const double d = p[i] - mean_d;
          ss += d * d;
        }
      }
      const double var = ss / static_cast<double>(m);
      const double unbiased = m > 1 ? ss / static_cast<double>(m - 1) : var;
      mu[ch] = static_cast<real>(mean_d);
      invstd[ch] = static_cast<real>(1.0 / std::sqrt(var + eps));
      rm[ch] = static_cast<real>((1.0 - momentum) * rm[ch] + momentum * mean_d);
      rv[ch] = static_cast<real>((1.0 - momentum) * rv[ch] + momentum * unbiased);
    }
  } else {
    for (int64_t ch = 0; ch < c; ++ch) {
      mu[ch] = running_mean.data()[ch];
      invstd[ch] = 1.0f / std::sqrt(running_var.data()[ch] + eps);
    }
  }
  Tensor out(x.shape());
  auto o = out.data();
  auto gm = gamma.data();
  auto bt = beta.data();
  for (int64_t b = 0; b < n; ++b)
    for (int64_t ch = 0; ch < c; ++ch) {
      const real a = gm[ch] * invstd[ch];
      const real sh = bt[ch] - a * mu[ch];
      const int64_t off = (b * c + ch) * hw;
      for (int64_t i = 0; i < hw; ++i) o[off + i] = a * in[off + i] + sh;
    }
  detail::record(out, "batch_norm2d", {x, gamma, beta},
                 [x, gamma, beta, mu, invstd, training, n, c, hw](std::span<const real> g) {
                   const int64_t m = n * hw;
                   auto in = x.data();
                   auto gm = gamma.data();
                   std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
                   for (int64_t b = 0; b < n; ++b)
                     for (int64_t ch = 0; ch < c; ++ch) {
                       const int64_t off = (b * c + ch) * hw;
                       for (int64_t i = 0; i < hw; ++i) {
                         const real xh = (in[off + i] - mu[ch]) * invstd[ch];
                         sum_g[ch] += g[off + i];
                         sum_gx[ch] += g[off + i] * xh;
                       }
                     }
                   if (gamma.requires_grad()) {
                     auto gg = gbuf(gamma);
                     for (int64_t ch = 0; ch < c; ++ch) gg[ch] += static_cast<real>(sum_gx[ch]);
                   }
                   if (beta.requires_grad()) {
                     auto gb = gbuf(beta);
                     for (int64_t ch = 0; ch < c; ++ch) gb[ch] += static_cast<real>(sum_g[ch]);
                   }
                   if (!x.requires_grad()) return;
                   auto gx = gbuf(x);
                   for (int64_t b = 0; b < n; ++b)
                     for (int64_t ch = 0; ch < c; ++ch) {
                       const int64_t off = (b * c + ch) * hw;
                       const real a = gm[ch] * invstd[ch];
                       if (!training) {
                         for (int64_t i = 0; i < hw; ++i) gx[off + i] += a * g[off + i];
                         continue;
                       }
                       const real mg = static_cast<real>(sum_g[ch] / m);
                       const real mgx = static_cast<real>(sum_gx[ch] / m);
                       for (int64_t i = 0; i < hw; ++i) {
                         const real xh = (in[off + i] - mu[ch]) * invstd[ch];
                         gx[off + i] += a * (g[off + i] - mg - xh * mgx);
                       }
                     }
                 });
  return out;
}

Tensor max_pool2d(const Tensor& x, int kernel, int stride, int padding) {
  require_rank(x, 4, "max_pool2d");
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (kernel < 1 || stride < 1 || padding < 0 || h + 2 * padding < kernel ||
      w + 2 * padding < kernel) {
    throw DimensionError("max_pool2d: invalid geometry for " + shape_str(x.shape()));
  }
  const int64_t ho = (h + 2 * padding - kernel) / stride + 1;
  const int64_t wo = (w + 2 * padding - kernel) / stride + 1;
  Tensor out({n, c, ho, wo});
  std::vector<int64_t> arg(static_cast<size_t>(out.numel()));
  auto in = x.data();
  auto o = out.data();
  for (int64_t p = 0; p < n * c; ++p)
    for (int64_t oi = 0; oi < ho; ++oi)
      for (int64_t oj = 0; oj < wo; ++oj) {
        real best = -std::numeric_limits<real>::infinity();
        int64_t besti = -1;
        for (int64_t ki = 0; ki < kernel; ++ki)
          for (int64_t kj = 0; kj < kernel; ++kj) {
            const int64_t ii = oi * stride - padding + ki;
            const int64_t jj = oj * stride - padding + kj;
            if (ii < 0 || ii >= h || jj < 0 || jj >= w) continue;
            const int64_t idx = (p * h + ii) * w + jj;
            if (besti < 0 || in[idx] > best || std::isnan(in[idx])) {
              best = in[idx];
              besti = idx;
            }
          }
        const int64_t oidx = (p * ho + oi) * wo + oj;
        o[oidx] = best;
        arg[oidx] = besti;
      }
  detail::record(out, "max_pool2d", {x}, [x, arg = std::move(arg)](std::span<const real> g) {
    auto gx = gbuf(x);
    for (size_t i = 0; i < g.size(); ++i) gx[arg[i]] += g[i];
  });
  return out;
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank(x, 4, "global_avg_pool");
  const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor out({n, c});
  auto in = x.data();
  auto o = out.data();
  for (int64_t p = 0; p < n * c; ++p) {
    double s = 0.0;
    for (int64_t i = 0; i < hw; ++i) s += in[p * hw + i];
    o[p] = static_cast<real>(s / static_cast<double>(hw));
  }
  detail::record(out, "global_avg_pool", {x}, [x, n, c, hw](std::span<const real> g) {
    auto gx = gbuf(x);
    const real inv = 1.0f / static_cast<real>(hw);
    for (int64_t p = 0; p < n * c; ++p) {
      const real v = g[p] * inv;
      for (int64_t i = 0; i < hw; ++i) gx[p * hw + i] += v;
    }
  });
  return out;
}

Tensor channel_scale(const Tensor& x, const Tensor& s) {
  require_rank(x, 4, "channel_scale input");
  require_rank(s, 2, "channel_scale scale");
  const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (s.dim(0) != n || s.dim(1) != c) throw DimensionError("channel_scale: scale shape mismatch");
  Tensor out(x.shape());
  auto in = x.data();
  auto sv = s.data();
  auto o = out.data();
  for (int64_t p = 0; p < n * c; ++p)
    for (int64_t i = 0; i < hw; ++i) o[p * hw + i] = in[p * hw + i] * sv[p];
  detail::record(out, "channel_scale", {x, s}, [x, s, n, c, hw](std::span<const real> g) {
    auto in = x.data();
    auto sv = s.data();
    if (x.requires_grad()) {
      auto gx = gbuf(x);
      for (int64_t p = 0; p < n * c; ++p)
        for (int64_t i = 0; i < hw; ++i) gx[p * hw + i] += g[p * hw + i] * sv[p];
    }
    if (s.requires_grad()) {
      auto gs = gbuf(s);
      for (int64_t p = 0; p < n * c; ++p) {
        double acc = 0.0;
        for (int64_t i = 0; i < hw; ++i) acc += g[p * hw + i] * in[p * hw + i];
        gs[p] += static_cast<real>(acc);
      }
    }
  });
  return out;
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels,
                             Reduction reduction) {
  require_rank(logits, 2, "softmax_cross_entropy");
  const int64_t n = logits.dim(0), k = logits.dim(1);
  if (static_cast<int64_t>(labels.size()) != n) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(n) + " rows");
  }
  auto z = logits.data();
  std::vector<real> prob(static_cast<size_t>(n * k));
  std::vector<double> row_loss(static_cast<size_t>(n));
  double total = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || y >= k) throw DimensionError("softmax_cross_entropy: label out of range");
    const real* row = z.data() + i * k;
    const real mx = *std::max_element(row, row + k);
    double s = 0.0;
    for (int64_t j = 0; j < k; ++j) s += std::exp(static_cast<double>(row[j] - mx));
    const double lse = mx + std::log(s);
    row_loss[static_cast<size_t>(i)] = lse - row[y];
    total += lse - row[y];
    for (int64_t j = 0; j < k; ++j) {
      prob[i * k + j] = static_cast<real>(std::exp(static_cast<double>(row[j]) - lse));
    }
  }
  const bool per_row = reduction == Reduction::none;
  const real w = reduction == Reduction::mean ? 1.0f / static_cast<real>(n) : 1.0f;
  Tensor out;
  if (per_row) {
    out = Tensor({n});
    for (int64_t i = 0; i < n; ++i) out.data()[static_cast<size_t>(i)] = static_cast<real>(row_loss[static_cast<size_t>(i)]);
  } else {
    out = Tensor::scalar(static_cast<real>(total * w));
  }
  std::vector<int> ys(labels.begin(), labels.end());
  detail::record(out, "softmax_cross_entropy", {logits},
                 [logits, prob = std::move(prob), ys = std::move(ys), n, k, w, per_row](
                     std::span<const real> g) {
                   auto gz = gbuf(logits);
                   for (int64_t i = 0; i < n; ++i) {
                     const real s = per_row ? g[static_cast<size_t>(i)] : g[0] * w;
                     for (int64_t j = 0; j < k; ++j) {
                       const real t = (j == ys[i]) ? 1.0f : 0.0f;
                       gz[i * k + j] += s * (prob[i * k + j] - t);
                     }
                   }
                 });
  return out;
}

Tensor squared_error_rows(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "squared_error_rows");
  const int64_t n = rows_of(a);
  const int64_t d = n ? a.numel() / n : 0;
  if (d == 0) throw DimensionError("squared_error_rows: empty rows");
  Tensor out({n});
  auto x = a.data();
  auto y = b.data();
  for (int64_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      const double diff = x[i * d + j] - y[i * d + j];
      acc += diff * diff;
    }
    out.data()[i] = static_cast<real>(acc / static_cast<double>(d));
  }
  detail::record(out, "squared_error_rows", {a, b}, [a, b, n, d](std::span<const real> g) {
    auto x = a.data();
    auto y = b.data();
    const real inv = 2.0f / static_cast<real>(d);
    for (int64_t i = 0; i < n; ++i) {
      const real s = g[i] * inv;
      if (a.requires_grad()) {
        auto ga = gbuf(a);
        for (int64_t j = 0; j < d; ++j) ga[i * d + j] += s * (x[i * d + j] - y[i * d + j]);
      }
      if (b.requires_grad()) {
        auto gb = gbuf(b);
        for (int64_t j = 0; j < d; ++j) gb[i * d + j] -= s * (x[i * d + j] - y[i * d + j]);
      }
    }
  });
  return out;
}

Tensor mse(const Tensor& a, const Tensor& b) { return mean(squared_error_rows(a, b)); }

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "cosine_similarity");
  const int64_t n = rows_of(a);
  const int64_t d = n ? a.numel() / n : 0;
  Tensor out({n});
  std::vector<real> na(n), nb(n), dot(n);
  auto x = a.data();
  auto y = b.data();
  for (int64_t i = 0; i < n; ++i) {
    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      const double u = x[i * d + j], v = y[i * d + j];
      sxx += u * u;
      syy += v * v;
      sxy += u * v;
    }
    na[i] = static_cast<real>(std::sqrt(sxx));
    nb[i] = static_cast<real>(std::sqrt(syy));
    dot[i] = static_cast<real>(sxy);
    const double den = std::max(std::sqrt(sxx) * std::sqrt(syy), static_cast<double>(kCosineEps));
    out.data()[i] = static_cast<real>(sxy / den);
  }
  detail::record(out, "cosine_similarity", {a, b},
                 [a, b, n, d, na, nb, dot](std::span<const real> g) {
                   auto x = a.data();
                   auto y = b.data();
                   for (int64_t i = 0; i < n; ++i) {
                     const real den = na[i] * nb[i];
                     // Clamped denominator: treat it as a constant.
                     const bool clamped = den <= kCosineEps;
                     const real dd = clamped ? kCosineEps : den;
                     const real cs = dot[i] / dd;
                     for (int pass = 0; pass < 2; ++pass) {
                       const Tensor& self = pass == 0 ? a : b;
                       if (!self.requires_grad()) continue;
                       auto gs = gbuf(self);
                       auto mine = pass == 0 ? x : y;
                       auto other = pass == 0 ? y : x;
                       const real nself = pass == 0 ? na[i] : nb[i];
                       for (int64_t j = 0; j < d; ++j) {
                         real v = other[i * d + j] / dd;
                         if (!clamped) v -= cs * mine[i * d + j] / (nself * nself);
                         gs[i * d + j] += g[i] * v;
                       }
                     }
                   }
                 });
  return out;
}

Tensor l2_normalize(const Tensor& v) {
  require_rank(v, 2, "l2_normalize");
  const int64_t n = v.dim(0), d = v.dim(1);
  Tensor out(v.shape());
  std::vector<real> norms(n);
  auto x = v.data();
  auto o = out.data();
  for (int64_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (int64_t j = 0; j < d; ++j) s += static_cast<double>(x[i * d + j]) * x[i * d + j];
    norms[i] = std::max(static_cast<real>(std::sqrt(s)), kCosineEps);
    for (int64_t j = 0; j < d; ++j) o[i * d + j] = x[i * d + j] / norms[i];
  }
  std::weak_ptr<detail::TensorImpl> wout = out.impl();
  detail::record(out, "l2_normalize", {v}, [v, wout, norms, n, d](std::span<const real> g) {
    auto y = wout.lock();
    auto gv = gbuf(v);
    for (int64_t i = 0; i < n; ++i) {
      const bool clamped = norms[i] <= kCosineEps;
      double yg = 0.0;
      if (!clamped) {
        for (int64_t j = 0; j < d; ++j) yg += y->data[i * d + j] * g[i * d + j];
      }
      for (int64_t j = 0; j < d; ++j) {
        gv[i * d + j] += (g[i * d + j] - static_cast<real>(yg) * y->data[i * d + j]) / norms[i];
      }
    }
  });
  return out;
}

Tensor stack_columns(const std::vector<Tensor>& columns) {
  if (columns.empty()) throw DimensionError("stack_columns: no columns");
  const int64_t n = columns.front().numel();
  const int64_t k = static_cast<int64_t>(columns.size());
  for (const auto& c : columns) {
    if (c.rank() != 1 || c.numel() != n) throw DimensionError("stack_columns: ragged columns");
  }
  Tensor out({n, k});
  for (int64_t j = 0; j < k; ++j)
    for (int64_t i = 0; i < n; ++i) out.data()[i * k + j] = columns[j].data()[i];
  detail::record(out, "stack_columns", columns, [columns, n, k](std::span<const real> g) {
    for (int64_t j = 0; j < k; ++j) {
      if (!columns[j].requires_grad()) continue;
      auto gc = gbuf(columns[j]);
      for (int64_t i = 0; i < n; ++i) gc[i] += g[i * k + j];
    }
  });
  return out;
}

namespace {

void depthwise_correlate(const real* in, real* out, int64_t planes, int64_t h, int64_t w,
                         const real* kern, int64_t ks, bool flip) {
  const int64_t r = ks / 2;
  for (int64_t p = 0; p < planes; ++p) {
    const real* src = in + p * h * w;
    real* dst = out + p * h * w;
    for (int64_t i = 0; i < h; ++i)
      for (int64_t j = 0; j < w; ++j) {
        real acc = 0.0f;
        for (int64_t ki = 0; ki < ks; ++ki) {
          const int64_t ii = i + ki - r;
          if (ii < 0 || ii >= h) continue;
          for (int64_t kj = 0; kj < ks; ++kj) {
            const int64_t jj = j + kj - r;
            if (jj < 0 || jj >= w) continue;
            const real kv = flip ? kern[(ks - 1 - ki) * ks + (ks - 1 - kj)] : kern[ki * ks + kj];
            acc += kv * src[ii * w + jj];
          }
        }
        dst[i * w + j] += acc;
      }
  }
}

}  // namespace

Tensor gaussian_blur(const Tensor& x, const Tensor& kernel) {
  require_rank(x, 4, "gaussian_blur input");
  require_rank(kernel, 2, "gaussian_blur kernel");
  const int64_t ks = kernel.dim(0);
  if (kernel.dim(1) != ks || ks % 2 == 0) {
    throw DimensionError("gaussian_blur: kernel must be square with odd size");
  }
  const int64_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor out(x.shape());
  depthwise_correlate(x.ptr(), out.ptr(), planes, h, w, kernel.ptr(), ks, false);
  detail::record(out, "gaussian_blur", {x}, [x, kernel, planes, h, w, ks](std::span<const real> g) {
    depthwise_correlate(g.data(), gbuf(x).data(), planes, h, w, kernel.ptr(), ks, true);
  });
  return out;
}

Tensor gaussian_kernel(int size, real sigma) {
  if (size < 1 || size % 2 == 0 || sigma <= 0.0f) {
    throw ConfigError("gaussian kernel needs an odd size and positive sigma");
  }
  const int r = size / 2;
  std::vector<double> g1(size);
  for (int i = 0; i < size; ++i) {
    const double t = i - r;
    g1[i] = std::exp(-t * t / (2.0 * sigma * sigma));
  }
  double total = 0.0;
  for (double a : g1)
    for (double b : g1) total += a * b;
  Tensor k({size, size});
  for (int i = 0; i < size; ++i)
    for (int j = 0; j < size; ++j) k.data()[i * size + j] = static_cast<real>(g1[i] * g1[j] / total);
  return k;
}

Tensor resize_pad(const Tensor& x, std::span<const ResizePad> per_sample) {
  require_rank(x, 4, "resize_pad");
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (static_cast<int64_t>(per_sample.size()) != n) {
    throw DimensionError("resize_pad: one transform per sample required");
  }
  // src[i] is the flat source index of output pixel i, or -1 for padding.
  std::vector<int64_t> src(static_cast<size_t>(x.numel()), -1);
  for (int64_t s = 0; s < n; ++s) {
    const auto& t = per_sample[s];
    for (int64_t ch = 0; ch < c; ++ch) {
      const int64_t plane = (s * c + ch) * h * w;
      if (!t.active) {
        for (int64_t i = 0; i < h * w; ++i) src[plane + i] = plane + i;
        continue;
      }
      if (t.size < 1 || t.size > h || t.size > w || t.top < 0 || t.left < 0 ||
          t.top + t.size > h || t.left + t.size > w) {
        throw DimensionError("resize_pad: transform does not fit the image");
      }
      for (int64_t i = 0; i < t.size; ++i) {
        const int64_t si = i * h / t.size;
        for (int64_t j = 0; j < t.size; ++j) {
          const int64_t sj = j * w / t.size;
          src[plane + (t.top + i) * w + (t.left + j)] = plane + si * w + sj;
        }
      }
    }
  }
  Tensor out(x.shape());
  auto in = x.data();
  auto o = out.data();
  for (size_t i = 0; i < src.size(); ++i) o[i] = src[i] >= 0 ? in[src[i]] : 0.0f;
  detail::record(out, "resize_pad", {x}, [x, src = std::move(src)](std::span<const real> g) {
    auto gx = gbuf(x);
    for (size_t i = 0; i < g.size(); ++i) {
      if (src[i] >= 0) gx[src[i]] += g[i];
    }
  });
  return out;
}

}  // namespace LBBA_PRECISION_NS
}  // namespace lbba
