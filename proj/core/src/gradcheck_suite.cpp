#include "lbba/gradcheck_suite.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>

#include "lbba/gradcheck.hpp"
#include "lbba/nets.hpp"
#include "lbba/ops.hpp"

namespace lbba {
inline namespace LBBA_PRECISION_NS {

namespace {

using Clock = std::chrono::steady_clock;

struct Case {
  std::mt19937_64 rng;
  real h;

  int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

  Tensor rand(Shape s, real lo = -1, real hi = 1) {
    Tensor t(std::move(s));
    std::uniform_real_distribution<real> d(lo, hi);
    for (auto& v : t.data()) v = d(rng);
    return t;
  }

  // Values bounded away from zero by more than the step, for kinked ops.
  Tensor rand_off_zero(Shape s) {
    Tensor t = rand(std::move(s));
    for (auto& v : t.data()) {
      if (std::abs(v) < 10 * h) v = v < 0 ? v - 0.1f : v + 0.1f;
    }
    return t;
  }

  std::vector<int> labels(int n, int classes) {
    std::vector<int> out(static_cast<size_t>(n));
    for (auto& l : out) l = uniform_int(0, classes - 1);
    return out;
  }
};

// Reduces any output to a scalar with fixed random weights so every output
// element contributes a distinct amount.
Tensor weigh(const Tensor& y, const Tensor& r) { return sum(mul(y, r)); }

using Check = std::function<double(Case&)>;

// For an op of one tensor argument: checks the gradient through that argument.
double check_unary(Case& c, const Tensor& x, const std::function<Tensor(const Tensor&)>& op) {
  Tensor probe;
  {
    NoGradGuard ng;
    probe = op(x);
  }
  Tensor r = c.rand(probe.shape());
  return finite_difference_check([&](const Tensor& t) { return weigh(op(t), r); }, x, c.h,
                                 {64, CoordinateSampling::uniform, c.rng()});
}

// Checks every argument of an op of several tensors in turn.
double check_nary(Case& c, std::vector<Tensor> args,
                  const std::function<Tensor(const std::vector<Tensor>&)>& op) {
  double worst = 0.0;
  for (size_t k = 0; k < args.size(); ++k) {
    worst = std::max(worst, check_unary(c, args[k], [&](const Tensor& t) {
      auto a = args;
      a[k] = t;
      return op(a);
    }));
  }
  return worst;
}

Shape random_shape(Case& c, int rank, int lo = 1, int hi = 5) {
  Shape s(static_cast<size_t>(rank));
  for (auto& d : s) d = c.uniform_int(lo, hi);
  return s;
}

std::vector<std::pair<std::string, Check>> primitive_checks() {
  std::vector<std::pair<std::string, Check>> v;
  v.emplace_back("add", [](Case& c) {
    Shape s = random_shape(c, c.uniform_int(1, 4));
    return check_nary(c, {c.rand(s), c.rand(s)}, [](auto& a) { return add(a[0], a[1]); });
  });
  v.emplace_back("sub", [](Case& c) {
    Shape s = random_shape(c, c.uniform_int(1, 4));
    return check_nary(c, {c.rand(s), c.rand(s)}, [](auto& a) { return sub(a[0], a[1]); });
  });
  v.emplace_back("mul", [](Case& c) {
    Shape s = random_shape(c, c.uniform_int(1, 4));
    return check_nary(c, {c.rand(s), c.rand(s)}, [](auto& a) { return mul(a[0], a[1]); });
  });
  v.emplace_back("scale", [](Case& c) {
    const real k = c.rand({1}).item() * 3;
    return check_unary(c, c.rand(random_shape(c, 3)), [k](const Tensor& t) { return scale(t, k); });
  });
  v.emplace_back("sum", [](Case& c) {
    return check_unary(c, c.rand(random_shape(c, c.uniform_int(1, 4))), [](const Tensor& t) { return sum(t); });
  });
  v.emplace_back("mean", [](Case& c) {
    return check_unary(c, c.rand(random_shape(c, c.uniform_int(1, 4))), [](const Tensor& t) { return mean(t); });
  });
  v.emplace_back("reshape_flatten", [](Case& c) {
    Shape s = random_shape(c, 4);
    return check_unary(c, c.rand(s), [s](const Tensor& t) {
      return reshape(flatten(t), {s[0] * s[1], s[2] * s[3]});
    });
  });
  v.emplace_back("relu", [](Case& c) {
    return check_unary(c, c.rand_off_zero(random_shape(c, 3)), [](const Tensor& t) { return relu(t); });
  });
  v.emplace_back("sigmoid", [](Case& c) {
    return check_unary(c, c.rand(random_shape(c, 2), -4, 4), [](const Tensor& t) { return sigmoid(t); });
  });
  v.emplace_back("matmul", [](Case& c) {
    const int m = c.uniform_int(1, 6), k = c.uniform_int(1, 6), n = c.uniform_int(1, 6);
    const bool tb = c.uniform_int(0, 1) == 1;
    Tensor b = tb ? c.rand({n, k}) : c.rand({k, n});
    return check_nary(c, {c.rand({m, k}), b}, [tb](auto& a) { return matmul(a[0], a[1], tb); });
  });
  v.emplace_back("linear", [](Case& c) {
    const int n = c.uniform_int(1, 5), in = c.uniform_int(1, 8), out = c.uniform_int(1, 8);
    return check_nary(c, {c.rand({n, in}), c.rand({out, in}), c.rand({out})},
                      [](auto& a) { return linear(a[0], a[1], a[2]); });
  });
  v.emplace_back("conv2d", [](Case& c) {
    const int groups = c.uniform_int(1, 2);
    const int cin = groups * c.uniform_int(1, 3), cout = groups * c.uniform_int(1, 3);
    const int k = c.uniform_int(0, 1) ? 3 : 1;
    const Conv2dOptions opt{c.uniform_int(1, 2), k == 3 ? c.uniform_int(0, 1) : 0, groups};
    const int hgt = c.uniform_int(k, 7), wid = c.uniform_int(k, 7);
    return check_nary(c, {c.rand({c.uniform_int(1, 3), cin, hgt, wid}), c.rand({cout, cin / groups, k, k})},
                      [opt](auto& a) { return conv2d(a[0], a[1], opt); });
  });
  v.emplace_back("batch_norm2d_train", [](Case& c) {
    const int ch = c.uniform_int(1, 4);
    Shape s{c.uniform_int(2, 4), ch, c.uniform_int(1, 4), c.uniform_int(1, 4)};
    return check_nary(c, {c.rand(s), c.rand({ch}, 0.5f, 1.5f), c.rand({ch})}, [ch](auto& a) {
      Tensor rm = Tensor::zeros({ch}), rv = Tensor::ones({ch});
      return batch_norm2d(a[0], a[1], a[2], rm, rv, true);
    });
  });
  v.emplace_back("batch_norm2d_eval", [](Case& c) {
    const int ch = c.uniform_int(1, 4);
    Shape s{c.uniform_int(1, 3), ch, c.uniform_int(1, 4), c.uniform_int(1, 4)};
    Tensor rm = c.rand({ch}), rv = c.rand({ch}, 0.5f, 2.0f);
    return check_nary(c, {c.rand(s), c.rand({ch}), c.rand({ch})}, [rm, rv](auto& a) mutable {
      return batch_norm2d(a[0], a[1], a[2], rm, rv, false);
    });
  });
  v.emplace_back("max_pool2d", [](Case& c) {
    const int k = c.uniform_int(2, 3);
    const int stride = c.uniform_int(1, 2);
    const int pad = k == 3 ? c.uniform_int(0, 1) : 0;
    Shape s{c.uniform_int(1, 3), c.uniform_int(1, 3), c.uniform_int(k, 7), c.uniform_int(k, 7)};
    return check_unary(c, c.rand(s), [=](const Tensor& t) { return max_pool2d(t, k, stride, pad); });
  });
  v.emplace_back("global_avg_pool", [](Case& c) {
    return check_unary(c, c.rand(random_shape(c, 4)), [](const Tensor& t) { return global_avg_pool(t); });
  });
  v.emplace_back("channel_scale", [](Case& c) {
    Shape s = random_shape(c, 4);
    return check_nary(c, {c.rand(s), c.rand({s[0], s[1]})}, [](auto& a) { return channel_scale(a[0], a[1]); });
  });
  v.emplace_back("softmax_cross_entropy", [](Case& c) {
    const int n = c.uniform_int(1, 6), k = c.uniform_int(2, 10);
    const auto labels = c.labels(n, k);
    const auto red = c.uniform_int(0, 1) ? Reduction::sum : Reduction::mean;
    return check_unary(c, c.rand({n, k}, -3, 3),
                       [labels, red](const Tensor& t) { return softmax_cross_entropy(t, labels, red); });
  });
  v.emplace_back("squared_error_rows", [](Case& c) {
    Shape s = random_shape(c, c.uniform_int(2, 4));
    return check_nary(c, {c.rand(s), c.rand(s)}, [](auto& a) { return squared_error_rows(a[0], a[1]); });
  });
  v.emplace_back("mse", [](Case& c) {
    Shape s = random_shape(c, c.uniform_int(1, 4));
    return check_nary(c, {c.rand(s), c.rand(s)}, [](auto& a) { return mse(a[0], a[1]); });
  });
  v.emplace_back("cosine_similarity", [](Case& c) {
    Shape s = random_shape(c, c.uniform_int(2, 4));
    return check_nary(c, {c.rand(s), c.rand(s)}, [](auto& a) { return cosine_similarity(a[0], a[1]); });
  });
  v.emplace_back("l2_normalize", [](Case& c) {
    return check_unary(c, c.rand(random_shape(c, 2, 1, 8)), [](const Tensor& t) { return l2_normalize(t); });
  });
  v.emplace_back("stack_columns", [](Case& c) {
    const int n = c.uniform_int(1, 6), k = c.uniform_int(1, 4);
    std::vector<Tensor> cols;
    for (int i = 0; i < k; ++i) cols.push_back(c.rand({n}));
    return check_nary(c, cols, [](auto& a) { return stack_columns(a); });
  });
  v.emplace_back("gaussian_blur", [](Case& c) {
    const int size = 2 * c.uniform_int(0, 3) + 1;
    Tensor kernel = gaussian_kernel(size, static_cast<real>(c.rand({1}, 0.5f, 3.0f).item()));
    return check_unary(c, c.rand(random_shape(c, 4, 1, 6)),
                       [kernel](const Tensor& t) { return gaussian_blur(t, kernel); });
  });
  v.emplace_back("resize_pad", [](Case& c) {
    const int n = c.uniform_int(1, 3), side = c.uniform_int(2, 8);
    std::vector<ResizePad> rp(static_cast<size_t>(n));
    for (auto& r : rp) {
      r.active = c.uniform_int(0, 3) != 0;
      r.size = c.uniform_int(1, side);
      r.top = c.uniform_int(0, side - r.size);
      r.left = c.uniform_int(0, side - r.size);
    }
    return check_unary(c, c.rand({n, c.uniform_int(1, 3), side, side}),
                       [rp](const Tensor& t) { return resize_pad(t, rp); });
  });
  return v;
}

double network_check(const GradcheckSuiteOptions& opt, uint64_t seed) {
  NetworkSpec spec;
  spec.height = opt.network_height;
  spec.width = opt.network_width;
  Model model = build(spec, seed);
  Case c{std::mt19937_64(seed), static_cast<real>(opt.h_network)};
  Tensor x = c.rand({4, 3, spec.height, spec.width}, 0, 1);
  const auto labels = c.labels(4, spec.num_classes);
  const FiniteDifferenceOptions fd{opt.network_coordinates, CoordinateSampling::uniform, seed};
  const real h = static_cast<real>(opt.h_network);

  model.eval();
  double worst = finite_difference_check(
      [&](const Tensor& t) { return softmax_cross_entropy(model.forward_logits(t), labels); }, x, h, fd);

  // Train mode: batch statistics take part in the gradient.
  model.train();
  for (const char* name : {"stem.conv.weight", "fc.weight"}) {
    const std::string pname = name;
    const Tensor w0 = model.params().get(pname).clone();
    worst = std::max(worst, finite_difference_check(
                                [&](const Tensor& t) {
                                  ParamOverrides ov{{pname, t}};
                                  return softmax_cross_entropy(model.forward_logits(x, &ov), labels);
                                },
                                w0, h, fd));
  }
  return worst;
}

}  // namespace

std::vector<GradcheckRow> run_gradcheck_suite(const GradcheckSuiteOptions& opt,
                                              const std::function<void(const GradcheckRow&)>& on_row) {
  std::vector<GradcheckRow> rows;
  uint64_t stream = 0;
  for (auto& [name, check] : primitive_checks()) {
    const auto t0 = Clock::now();
    GradcheckRow row{name, 0, 0.0, 0.0};
    for (int i = 0; i < opt.cases_per_primitive; ++i) {
      Case c{std::mt19937_64(opt.seed * 1000003ULL + (stream << 20) + static_cast<uint64_t>(i)),
             static_cast<real>(opt.h_primitive)};
      row.max_relative_error = std::max(row.max_relative_error, check(c));
      ++row.cases;
    }
    ++stream;
    row.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    if (on_row) on_row(row);
    rows.push_back(row);
  }
  if (opt.include_network) {
    const auto t0 = Clock::now();
    GradcheckRow row{"simplified_resnet18_forward_ce", 1, network_check(opt, opt.seed), 0.0};
    row.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    if (on_row) on_row(row);
    rows.push_back(row);
  }
  return rows;
}

}  // namespace LBBA_PRECISION_NS
}  // namespace lbba
