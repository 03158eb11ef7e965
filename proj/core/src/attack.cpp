#include "lbba/attack.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "lbba/errors.hpp"
#include "lbba/hash.hpp"
#include "lbba/ops.hpp"
#include "lbba/rng.hpp"

namespace lbba {
inline namespace LBBA_PRECISION_NS {

namespace {

constexpr uint64_t kGuideStream = 0x6d1de;
constexpr uint64_t kDiStream = 0xd1;

template <typename E>
E parse_enum(const std::string& s, std::initializer_list<std::pair<const char*, E>> table, const char* what) {
  for (const auto& [name, v] : table)
    if (s == name) return v;
  std::string options;
  for (const auto& [name, v] : table) options += std::string(options.empty() ? "" : ", ") + name;
  throw ConfigError(std::string("unknown ") + what + " '" + s + "' (expected one of: " + options + ")");
}

int64_t row_size(const Tensor& t) { return t.dim(0) ? t.numel() / t.dim(0) : 0; }

double row_norm(const real* p, int64_t n, Norm norm) {
  double acc = 0.0;
  if (norm == Norm::linf) {
    for (int64_t i = 0; i < n; ++i) acc = std::max(acc, std::abs(static_cast<double>(p[i])));
    return acc;
  }
  for (int64_t i = 0; i < n; ++i) acc += static_cast<double>(p[i]) * p[i];
  return std::sqrt(acc);
}

double row_l1(const real* p, int64_t n) {
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) acc += std::abs(static_cast<double>(p[i]));
  return acc;
}

// Scales one row onto the ball of radius r around 0 (no box).
void project_row(real* d, int64_t n, double r, Norm norm) {
  if (norm == Norm::linf) {
    const auto lim = static_cast<real>(r);
    for (int64_t i = 0; i < n; ++i) d[i] = std::clamp(d[i], -lim, lim);
    return;
  }
  const double len = row_norm(d, n, Norm::l2);
  if (len <= r) return;
  const double f = r / len;
  for (int64_t i = 0; i < n; ++i) d[i] = static_cast<real>(d[i] * f);
}

// x += sign * size * direction(g) per row: sign(g) for l-inf, g/|g|_2 for l2.
void step_rows(real* x, const real* g, int64_t rows, int64_t n, double size, Norm norm) {
  for (int64_t r = 0; r < rows; ++r) {
    real* xr = x + r * n;
    const real* gr = g + r * n;
    if (norm == Norm::linf) {
      const auto s = static_cast<real>(size);
      for (int64_t i = 0; i < n; ++i) xr[i] += gr[i] > 0 ? s : (gr[i] < 0 ? -s : 0.0f);
    } else {
      const double len = row_norm(gr, n, Norm::l2);
      if (len == 0.0) continue;
      const double f = size / len;
      for (int64_t i = 0; i < n; ++i) xr[i] = static_cast<real>(xr[i] + gr[i] * f);
    }
  }
}

std::vector<double> values_of(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

void require_finite(const Tensor& g, const std::string& where) {
  if (!g.all_finite()) throw NumericError("non-finite gradient " + where);
}

Tensor gather_rows(const Tensor& t, int64_t i) {
  Shape s = t.shape();
  s[0] = 1;
  const int64_t n = row_size(t);
  Tensor out(s);
  std::copy_n(t.ptr() + i * n, n, out.ptr());
  return out;
}

void put_rows(Tensor& dst, int64_t at, const Tensor& src) {
  std::copy_n(src.ptr(), src.numel(), dst.ptr() + at * row_size(dst));
}

// One inner perturbation: an activation-site delta (batched) or a first-layer
// weight delta (single-sample runs only).
struct Slot {
  bool guide_side = false;
  bool weight = false;
  TruncationPoint site = TruncationPoint::input;
  double budget = 0.0;
  Norm norm = Norm::linf;
  Tensor delta, best;
  int64_t rows() const { return weight ? 1 : delta.dim(0); }
  int64_t cols() const { return delta.numel() / rows(); }
};

struct Problem {
  const Model& model;
  const AttackConfig& cfg;
  Metric metric;
  TruncationPoint layer;
  Tensor source;  // x_s
  Tensor guide;   // x_g
  Tensor anchor;  // phi(x_s), contrastive-cos only
  Tensor guide_features;  // phi(x_g), frozen, when there is no inner problem
  std::string w1;
  bool inner = false;

  Problem(const Model& m, const AttackConfig& c, Tensor src, Tensor g)
      : model(m), cfg(c), metric(c.metric_value()), layer(c.layer), source(std::move(src)), guide(std::move(g)) {
    NoGradGuard ng;
    if (cfg.surface != Surface::deep) {
      if (metric == Metric::contrastive_cos) anchor = model.forward_features(source, layer);
      inner = cfg.has_inner() && !make_slots(source.dim(0)).empty();
      if (!inner) guide_features = model.forward_features(guide, layer);
    }
    if (cfg.surface == Surface::etf_weight) w1 = model.first_layer_weight();
  }

  std::vector<Slot> make_slots(int64_t n) const {
    std::vector<Slot> slots;
    const Norm tn = cfg.tau_norm_value();
    auto add_pair = [&](bool weight, TruncationPoint site, const Shape& shape, double budget, Norm norm) {
      if (!(budget > 0.0)) return;
      for (bool g : {false, true}) {
        Slot s;
        s.guide_side = g;
        s.weight = weight;
        s.site = site;
        s.budget = budget;
        s.norm = norm;
        s.delta = Tensor::zeros(shape);
        s.best = Tensor::zeros(shape);
        slots.push_back(std::move(s));
      }
    };
    switch (cfg.surface) {
    case Surface::etf:
      add_pair(false, TruncationPoint::input, source.shape(), cfg.tau_value(), tn);
      break;
    case Surface::etf_all:
      add_pair(false, TruncationPoint::input, source.shape(), cfg.tau_value(), tn);
      for (auto p : model.points()) {
        if (p == TruncationPoint::input || ordinal(p) >= ordinal(layer)) continue;
        add_pair(false, p, model.activation_shape(p, n), cfg.tau_hidden_value(), tn);
      }
      break;
    case Surface::etf_weight: {
      const Tensor& w = model.params().get(model.first_layer_weight());
      double mean_abs = 0.0;
      for (real v : w.data()) mean_abs += std::abs(static_cast<double>(v));
      mean_abs /= static_cast<double>(w.numel());
      const double tau_w = cfg.eps > 0.0 ? mean_abs * cfg.tau_value() / cfg.eps : 0.0;
      add_pair(true, TruncationPoint::input, w.shape(), tau_w, Norm::linf);
      break;
    }
    default:
      break;
    }
    return slots;
  }

  // phi of one side with the given deltas (use `best` when `use_best`).
  Tensor side_features(const Tensor& x, const std::vector<Slot>& slots, bool guide_side, bool use_best) const {
    PerturbationMap map;
    ParamOverrides ov;
    for (const auto& s : slots) {
      if (s.guide_side != guide_side) continue;
      const Tensor& d = use_best ? s.best : s.delta;
      if (s.weight) {
        ov[w1] = add(model.params().get(w1), d);
      } else {
        map[s.site] = d;
      }
    }
    const ParamOverrides* ovp = ov.empty() ? nullptr : &ov;
    if (map.empty()) return model.forward_features(x, layer, ovp);
    return model.forward_features_perturbed(x, map, layer, ovp);
  }

  Tensor distance(const Tensor& gf, const Tensor& f) const {
    return feature_distance(gf, f, anchor, metric, cfg.metric_temperature);
  }

  // Inner ascent at iterate x. Leaves the maximizers in slots[k].best.
  void inner_max(const Tensor& x, std::vector<Slot>& slots, std::vector<double>& initial,
                 std::vector<double>& best) const {
    const int k_steps = cfg.inner_steps;
    for (auto& s : slots) {
      std::fill(s.delta.data().begin(), s.delta.data().end(), 0.0f);
      std::fill(s.best.data().begin(), s.best.data().end(), 0.0f);
    }
    for (int k = 0; k <= k_steps; ++k) {
      const bool last = k == k_steps;
      for (auto& s : slots) s.delta.set_requires_grad(!last);
      Tensor value;
      {
        std::optional<NoGradGuard> ng;
        if (last) ng.emplace();
        value = distance(side_features(guide, slots, true, false), side_features(x, slots, false, false));
      }
      const auto v = values_of(value);
      if (k == 0) {
        initial = v;
        best = v;
      } else {
        for (size_t i = 0; i < v.size(); ++i) {
          if (!(v[i] > best[i])) continue;
          best[i] = v[i];
          for (auto& s : slots) {
            const int64_t c = s.cols();
            const int64_t r = s.weight ? 0 : static_cast<int64_t>(i);
            std::copy_n(s.delta.ptr() + r * c, c, s.best.ptr() + r * c);
          }
        }
      }
      if (last) break;
      backward(sum(value));
      // Each slot steps by the same fraction of its own budget.
      const double beta_scale = cfg.tau_value() > 0.0 ? cfg.beta() / cfg.tau_value() : 1.0 / k_steps;
      for (auto& s : slots) {
        Tensor g = s.delta.has_grad() ? Tensor(s.delta.shape(), std::vector<real>(s.delta.grad().begin(),
                                                                                  s.delta.grad().end()))
                                      : Tensor::zeros(s.delta.shape());
        require_finite(g, "in the inner maximization at step " + std::to_string(k));
        Tensor next = s.delta.clone();
        step_rows(next.ptr(), g.ptr(), s.rows(), s.cols(), beta_scale * s.budget, s.norm);
        for (int64_t r = 0; r < s.rows(); ++r) project_row(next.ptr() + r * s.cols(), s.cols(), s.budget, s.norm);
        s.delta = next;
      }
    }
    for (auto& s : slots) s.delta.set_requires_grad(false);
  }

  double delta_excess(const std::vector<Slot>& slots) const {
    double worst = -std::numeric_limits<double>::infinity();
    for (const auto& s : slots) {
      for (int64_t r = 0; r < s.rows(); ++r) {
        worst = std::max(worst, row_norm(s.best.ptr() + r * s.cols(), s.cols(), s.norm) - s.budget);
      }
    }
    return worst;
  }

  // Objective at x with the current best deltas; x may carry a DI transform.
  Tensor outer_value(const Tensor& x, std::span<const int> labels, const std::vector<Slot>& slots) const {
    if (cfg.surface == Surface::deep) return deep_loss_impl(x, labels);
    Tensor gf;
    if (inner) {
      NoGradGuard ng;
      gf = side_features(guide, slots, true, true);
    } else {
      gf = guide_features;
    }
    Tensor f = inner ? side_features(x, slots, false, true) : model.forward_features(x, layer);
    return distance(gf, f);
  }

  Tensor deep_loss_impl(const Tensor& x, std::span<const int> labels) const {
    return softmax_cross_entropy(model.forward_logits(x), labels, Reduction::none);
  }
};

std::vector<ResizePad> draw_di(const AttackConfig& cfg, std::span<const int64_t> ids, int step, int h, int w) {
  std::vector<ResizePad> out(ids.size());
  const int lo = static_cast<int>(std::floor(cfg.di_min_scale * std::min(h, w)));
  for (size_t i = 0; i < ids.size(); ++i) {
    Rng rng = make_rng({cfg.seed, kDiStream, static_cast<uint64_t>(ids[i]), static_cast<uint64_t>(step)});
    if (!bernoulli(rng, cfg.di_prob)) continue;
    ResizePad& r = out[i];
    r.active = true;
    r.size = static_cast<int>(uniform_int(rng, lo, std::min(h, w)));
    r.top = static_cast<int>(uniform_int(rng, 0, h - r.size));
    r.left = static_cast<int>(uniform_int(rng, 0, w - r.size));
  }
  return out;
}

AttackResult run_batch(const Model& model, const AttackBatch& batch, const AttackConfig& cfg,
                       const StepObserver& observer) {
  const int64_t n = batch.sources.dim(0);
  const int64_t per = row_size(batch.sources);
  const int h = static_cast<int>(batch.sources.dim(2)), w = static_cast<int>(batch.sources.dim(3));
  Problem prob(model, cfg, batch.sources, batch.guides);
  std::vector<Slot> slots = prob.inner ? prob.make_slots(n) : std::vector<Slot>{};
  std::vector<double> initial, best;
  AttackResult res;
  Tensor x = batch.sources.clone();

  auto final_objective = [&](const Tensor& at) {
    if (prob.inner) {
      prob.inner_max(at, slots, initial, best);
      return best;
    }
    NoGradGuard ng;
    return values_of(prob.outer_value(at, batch.labels, slots));
  };

  if (cfg.eps == 0.0) {
    res.x_adv = x;
    res.final_objective = final_objective(x);
    return res;
  }

  const double alpha = cfg.alpha();
  const double direction = cfg.surface == Surface::deep ? 1.0 : -1.0;
  const Tensor kernel = cfg.method == Method::ti ? gaussian_kernel(cfg.ti_size, static_cast<real>(cfg.ti_sigma))
                                                  : Tensor();
  Tensor momentum = cfg.method == Method::mi ? Tensor::zeros(x.shape()) : Tensor();

  for (int t = 0; t < cfg.steps; ++t) {
    if (prob.inner) {
      prob.inner_max(x, slots, initial, best);
      res.trace.inner_initial.push_back(initial);
      res.trace.inner_final.push_back(best);
    }
    Tensor xin = x.clone();
    xin.set_requires_grad();
    Tensor fed = xin;
    if (cfg.method == Method::di) {
      const auto rp = draw_di(cfg, batch.ids, t, h, w);
      if (std::any_of(rp.begin(), rp.end(), [](const ResizePad& r) { return r.active; })) fed = resize_pad(xin, rp);
    }
    Tensor value = prob.outer_value(fed, batch.labels, slots);
    res.trace.objective.push_back(values_of(value));
    backward(sum(value));
    Tensor g = xin.has_grad() ? Tensor(x.shape(), std::vector<real>(xin.grad().begin(), xin.grad().end()))
                              : Tensor::zeros(x.shape());
    require_finite(g, "at outer step " + std::to_string(t) + " (" + cfg.label() + ")");
    if (cfg.method == Method::ti) {
      NoGradGuard ng;
      g = gaussian_blur(g, kernel);
    }
    if (cfg.method == Method::mi) {
      for (int64_t r = 0; r < n; ++r) {
        real* m = momentum.ptr() + r * per;
        const real* gr = g.ptr() + r * per;
        const double l1 = row_l1(gr, per);
        const double inv = l1 > 0.0 ? 1.0 / l1 : 0.0;
        for (int64_t i = 0; i < per; ++i) m[i] = static_cast<real>(cfg.mi_decay * m[i] + gr[i] * inv);
      }
      g = momentum;
    }
    step_rows(x.ptr(), g.ptr(), n, per, direction * alpha, cfg.norm);
    x = project(x, batch.sources, cfg.eps, cfg.norm);
    if (observer) {
      StepView view;
      view.step = t + 1;
      view.iterate = &x;
      view.sources = &batch.sources;
      view.delta_excess = prob.inner ? prob.delta_excess(slots) : -std::numeric_limits<double>::infinity();
      observer(view);
    }
  }
  res.x_adv = x;
  res.final_objective = final_objective(x);
  return res;
}

void append_result(AttackResult& into, const AttackResult& part, int64_t at) {
  put_rows(into.x_adv, at, part.x_adv);
  into.final_objective.insert(into.final_objective.end(), part.final_objective.begin(), part.final_objective.end());
  auto merge = [](std::vector<std::vector<double>>& dst, const std::vector<std::vector<double>>& src) {
    if (dst.size() < src.size()) dst.resize(src.size());
    for (size_t t = 0; t < src.size(); ++t) dst[t].insert(dst[t].end(), src[t].begin(), src[t].end());
  };
  merge(into.trace.objective, part.trace.objective);
  merge(into.trace.inner_initial, part.trace.inner_initial);
  merge(into.trace.inner_final, part.trace.inner_final);
}

}  // namespace

std::string to_string(Norm v) { return v == Norm::linf ? "linf" : "l2"; }

std::string to_string(Method v) {
  switch (v) {
  case Method::pgd:
    return "pgd";
  case Method::mi:
    return "mi";
  case Method::di:
    return "di";
  case Method::ti:
    return "ti";
  }
  return "?";
}

std::string to_string(Surface v) {
  switch (v) {
  case Surface::deep:
    return "deep";
  case Surface::shallow:
    return "shallow";
  case Surface::etf:
    return "etf";
  case Surface::etf_all:
    return "etf-all";
  case Surface::etf_weight:
    return "etf-weight";
  }
  return "?";
}

std::string to_string(Metric v) { return v == Metric::mse ? "mse" : "contrastive-cos"; }

std::string to_string(GuideStrategy v) {
  return v == GuideStrategy::random_diff_label ? "random-diff-label" : "feature-far";
}

Norm norm_from_string(const std::string& s) {
  return parse_enum<Norm>(s, {{"linf", Norm::linf}, {"l2", Norm::l2}}, "norm");
}

Method method_from_string(const std::string& s) {
  return parse_enum<Method>(s, {{"pgd", Method::pgd}, {"mi", Method::mi}, {"di", Method::di}, {"ti", Method::ti}},
                            "method");
}

Surface surface_from_string(const std::string& s) {
  return parse_enum<Surface>(s,
                             {{"deep", Surface::deep},
                              {"shallow", Surface::shallow},
                              {"etf", Surface::etf},
                              {"etf-all", Surface::etf_all},
                              {"etf-weight", Surface::etf_weight}},
                             "surface");
}

Metric metric_from_string(const std::string& s) {
  return parse_enum<Metric>(s, {{"mse", Metric::mse}, {"contrastive-cos", Metric::contrastive_cos}}, "metric");
}

GuideStrategy guide_from_string(const std::string& s) {
  return parse_enum<GuideStrategy>(
      s, {{"random-diff-label", GuideStrategy::random_diff_label}, {"feature-far", GuideStrategy::feature_far}},
      "guide strategy");
}

double l2_budget(int64_t n) { return 16.0 / 255.0 * std::sqrt(static_cast<double>(n)); }

double AttackConfig::alpha() const { return step_size ? *step_size : 2.0 * eps / steps; }
double AttackConfig::tau_value() const { return tau ? *tau : eps / 2.0; }
Norm AttackConfig::tau_norm_value() const { return tau_norm ? *tau_norm : norm; }
double AttackConfig::tau_hidden_value() const { return tau_hidden ? *tau_hidden : tau_value(); }
double AttackConfig::beta() const { return inner_step_size ? *inner_step_size : tau_value() / inner_steps; }

Metric AttackConfig::metric_value() const {
  if (metric) return *metric;
  return surface == Surface::shallow || surface == Surface::deep ? Metric::mse : Metric::contrastive_cos;
}

void AttackConfig::validate() const {
  if (!(eps >= 0.0) || !std::isfinite(eps)) throw ConfigError("eps must be >= 0");
  if (steps < 1) throw ConfigError("steps must be >= 1");
  if (eps > 0.0 && !(alpha() > 0.0)) throw ConfigError("step size must be positive");
  if (!(tau_value() >= 0.0) || !(tau_hidden_value() >= 0.0)) throw ConfigError("tau must be >= 0");
  if (inner_steps < 1) throw ConfigError("inner_steps must be >= 1");
  if (tau_value() > 0.0 && !(beta() > 0.0)) throw ConfigError("inner step size must be positive");
  if (mi_decay < 0.0) throw ConfigError("mi_decay must be >= 0");
  if (di_prob < 0.0 || di_prob > 1.0) throw ConfigError("di_prob must lie in [0,1]");
  if (!(di_min_scale > 0.0 && di_min_scale <= 1.0)) throw ConfigError("di_min_scale must lie in (0,1]");
  if (ti_size < 1 || ti_size % 2 == 0) throw ConfigError("ti_size must be odd and positive");
  if (!(ti_sigma > 0.0)) throw ConfigError("ti_sigma must be positive");
  if (!(metric_temperature > 0.0)) throw ConfigError("metric temperature must be positive");
  if (surface != Surface::deep && layer == TruncationPoint::input) {
    throw ConfigError("feature surfaces need a truncation point after the input");
  }
}

nlohmann::json AttackConfig::to_json() const {
  return {{"norm", to_string(norm)},
          {"eps", eps},
          {"steps", steps},
          {"step_size", alpha()},
          {"method", to_string(method)},
          {"mi_decay", mi_decay},
          {"di_prob", di_prob},
          {"di_min_scale", di_min_scale},
          {"ti_size", ti_size},
          {"ti_sigma", ti_sigma},
          {"surface", to_string(surface)},
          {"layer", to_string(layer)},
          {"metric", to_string(metric_value())},
          {"metric_temperature", metric_temperature},
          {"tau", tau_value()},
          {"tau_norm", to_string(tau_norm_value())},
          {"tau_hidden", tau_hidden_value()},
          {"inner_steps", inner_steps},
          {"inner_step_size", beta()},
          {"guide", to_string(guide)},
          {"seed", seed}};
}

AttackConfig AttackConfig::from_json(const nlohmann::json& j) {
  AttackConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "norm") c.norm = norm_from_string(v.get<std::string>());
    else if (key == "eps") c.eps = v.get<double>();
    else if (key == "steps") c.steps = v.get<int>();
    else if (key == "step_size") c.step_size = v.get<double>();
    else if (key == "method") c.method = method_from_string(v.get<std::string>());
    else if (key == "mi_decay") c.mi_decay = v.get<double>();
    else if (key == "di_prob") c.di_prob = v.get<double>();
    else if (key == "di_min_scale") c.di_min_scale = v.get<double>();
    else if (key == "ti_size") c.ti_size = v.get<int>();
    else if (key == "ti_sigma") c.ti_sigma = v.get<double>();
    else if (key == "surface") c.surface = surface_from_string(v.get<std::string>());
    else if (key == "layer") c.layer = truncation_from_string(v.get<std::string>());
    else if (key == "metric") c.metric = metric_from_string(v.get<std::string>());
    else if (key == "metric_temperature") c.metric_temperature = v.get<double>();
    else if (key == "tau") c.tau = v.get<double>();
    else if (key == "tau_norm") c.tau_norm = norm_from_string(v.get<std::string>());
    else if (key == "tau_hidden") c.tau_hidden = v.get<double>();
    else if (key == "inner_steps") c.inner_steps = v.get<int>();
    else if (key == "inner_step_size") c.inner_step_size = v.get<double>();
    else if (key == "guide") c.guide = guide_from_string(v.get<std::string>());
    else if (key == "seed") c.seed = v.get<uint64_t>();
    else throw ConfigError("unknown attack key '" + key + "'");
  }
  c.validate();
  return c;
}

std::string AttackConfig::hash() const { return sha256_hex(to_json().dump()); }

std::string AttackConfig::label() const {
  std::string s;
  switch (surface) {
  case Surface::deep:
    s = "Deep";
    break;
  case Surface::shallow:
    s = "Shallow";
    break;
  case Surface::etf:
    s = "ETF";
    break;
  case Surface::etf_all:
    s = "ETF-All";
    break;
  case Surface::etf_weight:
    s = "ETF-Weight";
    break;
  }
  std::string m = to_string(method);
  std::transform(m.begin(), m.end(), m.begin(), [](unsigned char ch) { return static_cast<char>(std::toupper(ch)); });
  return s + "-" + m;
}

Surrogate::Surrogate(Model model) : model_(std::move(model)) { model_.eval(); }

Tensor project(const Tensor& x, const Tensor& source, double eps, Norm norm) {
  if (x.shape() != source.shape()) {
    throw DimensionError("project: iterate " + shape_str(x.shape()) + " vs source " + shape_str(source.shape()));
  }
  Tensor out = x.clone();
  const int64_t rows = out.rank() ? out.dim(0) : 1;
  const int64_t n = rows ? out.numel() / rows : 0;
  real* o = out.ptr();
  const real* s = source.ptr();
  std::vector<real> d(static_cast<size_t>(n));
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t i = 0; i < n; ++i) d[static_cast<size_t>(i)] = o[r * n + i] - s[r * n + i];
    project_row(d.data(), n, eps, norm);
    for (int64_t i = 0; i < n; ++i) {
      o[r * n + i] = std::clamp(s[r * n + i] + d[static_cast<size_t>(i)], real(0), real(1));
    }
  }
  return out;
}

Tensor project_delta(const Tensor& delta, double tau, Norm norm) {
  Tensor out = delta.clone();
  const int64_t rows = out.rank() ? out.dim(0) : 1;
  const int64_t n = rows ? out.numel() / rows : 0;
  for (int64_t r = 0; r < rows; ++r) project_row(out.ptr() + r * n, n, tau, norm);
  return out;
}

std::vector<double> sample_norms(const Tensor& x, Norm norm) {
  const int64_t rows = x.rank() ? x.dim(0) : 1;
  const int64_t n = rows ? x.numel() / rows : 0;
  std::vector<double> out(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) out[static_cast<size_t>(r)] = row_norm(x.ptr() + r * n, n, norm);
  return out;
}

std::vector<int64_t> select_guides(std::span<const int64_t> sources, const SampleSet& pool, GuideStrategy strategy,
                                   uint64_t seed, const Surrogate* surrogate, TruncationPoint layer) {
  if (!pool.has_labels()) throw DataError("guide selection needs pool labels");
  Tensor features;
  if (strategy == GuideStrategy::feature_far) {
    if (!surrogate) throw ConfigError("feature-far guide selection needs a surrogate");
    NoGradGuard ng;
    const Shape s = surrogate->model().activation_shape(layer, pool.size());
    features = Tensor(s);
    const int64_t per = row_size(features);
    constexpr int64_t kChunk = 64;
    for (int64_t at = 0; at < pool.size(); at += kChunk) {
      std::vector<int64_t> idx;
      for (int64_t i = at; i < std::min(pool.size(), at + kChunk); ++i) idx.push_back(i);
      Tensor f = surrogate->model().forward_features(pool.gather(idx), layer);
      std::copy_n(f.ptr(), f.numel(), features.ptr() + at * per);
    }
  }
  std::vector<int64_t> out;
  out.reserve(sources.size());
  for (int64_t src : sources) {
    if (src < 0 || src >= pool.size()) throw DataError("guide selection: source index out of range");
    const int label = pool.labels[static_cast<size_t>(src)];
    std::vector<int64_t> cand;
    for (int64_t i = 0; i < pool.size(); ++i)
      if (pool.labels[static_cast<size_t>(i)] != label) cand.push_back(i);
    if (cand.empty()) throw DataError("guide selection: pool has no sample outside class " + std::to_string(label));
    if (strategy == GuideStrategy::random_diff_label) {
      Rng rng = make_rng({seed, kGuideStream, static_cast<uint64_t>(src)});
      out.push_back(cand[static_cast<size_t>(uniform_int(rng, 0, static_cast<int64_t>(cand.size()) - 1))]);
      continue;
    }
    const int64_t per = row_size(features);
    const real* fs = features.ptr() + src * per;
    double best = -1.0;
    int64_t pick = cand.front();
    for (int64_t c : cand) {
      const real* fc = features.ptr() + c * per;
      double acc = 0.0;
      for (int64_t i = 0; i < per; ++i) {
        const double d = static_cast<double>(fc[i]) - fs[i];
        acc += d * d;
      }
      acc /= static_cast<double>(per);
      if (acc > best) {
        best = acc;
        pick = c;
      }
    }
    out.push_back(pick);
  }
  return out;
}

int64_t select_guide(int64_t source_idx, const SampleSet& pool, GuideStrategy strategy, uint64_t seed,
                     const Surrogate* surrogate, TruncationPoint layer) {
  const int64_t one[] = {source_idx};
  return select_guides(one, pool, strategy, seed, surrogate, layer).front();
}

Tensor deep_loss(const Surrogate& s, const Tensor& x, std::span<const int> labels) {
  return softmax_cross_entropy(s.model().forward_logits(x), labels, Reduction::none);
}

Tensor feature_distance(const Tensor& guide_features, const Tensor& features, const Tensor& anchor, Metric metric,
                        double temperature) {
  if (metric == Metric::mse) return squared_error_rows(features, guide_features);
  if (!anchor.defined()) throw ConfigError("contrastive-cos distance needs the source anchor");
  // Two-way softmax: the guide is the positive, the frozen source the negative.
  Tensor logits = scale(stack_columns({cosine_similarity(features, guide_features), cosine_similarity(features, anchor)}),
                        static_cast<real>(1.0 / temperature));
  const std::vector<int> target(static_cast<size_t>(features.dim(0)), 0);
  return softmax_cross_entropy(logits, target, Reduction::none);
}

Tensor shallow_loss(const Surrogate& s, const Tensor& x, const Tensor& guide, const Tensor& source,
                    TruncationPoint layer, Metric metric, double temperature) {
  Tensor gf, anchor;
  {
    NoGradGuard ng;
    gf = s.model().forward_features(guide, layer);
    if (metric == Metric::contrastive_cos) anchor = s.model().forward_features(source, layer);
  }
  return feature_distance(gf, s.model().forward_features(x, layer), anchor, metric, temperature);
}

InnerResult etf_inner_max(const Surrogate& s, const Tensor& x, const Tensor& guide, const Tensor& source,
                          const AttackConfig& cfg) {
  cfg.validate();
  if (!cfg.has_inner()) throw ConfigError("etf_inner_max needs an etf surface");
  InnerResult out;
  const int64_t n = x.dim(0);
  auto run_one = [&](const Tensor& xi, const Tensor& gi, const Tensor& si) {
    Problem prob(s.model(), cfg, si, gi);
    std::vector<Slot> slots = prob.make_slots(xi.dim(0));
    std::vector<double> initial, best;
    if (slots.empty()) {
      NoGradGuard ng;
      initial = values_of(prob.outer_value(xi, {}, slots));
      best = initial;
    } else {
      prob.inner_max(xi, slots, initial, best);
    }
    return std::make_tuple(std::move(slots), std::move(initial), std::move(best));
  };
  if (cfg.surface == Surface::etf_weight) {
    for (int64_t i = 0; i < n; ++i) {
      auto [slots, initial, best] = run_one(gather_rows(x, i), gather_rows(guide, i), gather_rows(source, i));
      for (const auto& sl : slots) (sl.guide_side ? out.weight_guide : out.weight_source).push_back(sl.best);
      out.initial.insert(out.initial.end(), initial.begin(), initial.end());
      out.final_value.insert(out.final_value.end(), best.begin(), best.end());
    }
    return out;
  }
  auto [slots, initial, best] = run_one(x, guide, source);
  out.delta_source = Tensor::zeros(x.shape());
  out.delta_guide = Tensor::zeros(x.shape());
  for (const auto& sl : slots) {
    if (sl.site == TruncationPoint::input) {
      (sl.guide_side ? out.delta_guide : out.delta_source) = sl.best;
    } else {
      (sl.guide_side ? out.hidden_guide : out.hidden_source)[sl.site] = sl.best;
    }
  }
  out.initial = std::move(initial);
  out.final_value = std::move(best);
  return out;
}

AttackResult run_attack(const Surrogate& s, const AttackBatch& batch, const AttackConfig& cfg,
                        const StepObserver& observer) {
  cfg.validate();
  const Tensor& src = batch.sources;
  if (src.rank() != 4) throw DimensionError("attack sources must be (N,C,H,W)");
  const int64_t n = src.dim(0);
  if (cfg.surface != Surface::deep && batch.guides.shape() != src.shape()) {
    throw DimensionError("guides " + shape_str(batch.guides.shape()) + " do not match sources " +
                         shape_str(src.shape()));
  }
  if (cfg.surface == Surface::deep && static_cast<int64_t>(batch.labels.size()) != n) {
    throw DataError("the deep surface needs one label per source");
  }
  if (static_cast<int64_t>(batch.ids.size()) != n) throw DimensionError("need one id per source");
  if (cfg.surface != Surface::etf_weight || n == 1) return run_batch(s.model(), batch, cfg, observer);

  // Weight deltas are per instance, so this surface runs one sample at a time.
  AttackResult all;
  all.x_adv = Tensor(src.shape());
  for (int64_t i = 0; i < n; ++i) {
    AttackBatch one;
    one.sources = gather_rows(src, i);
    one.guides = gather_rows(batch.guides, i);
    one.ids = {batch.ids[static_cast<size_t>(i)]};
    if (!batch.labels.empty()) one.labels = {batch.labels[static_cast<size_t>(i)]};
    append_result(all, run_batch(s.model(), one, cfg, observer), i);
  }
  return all;
}

AttackResult attack_pool(const Surrogate& s, const SampleSet& pool, std::span<const int64_t> sources,
                         std::span<const int64_t> guides, const AttackConfig& cfg, int chunk) {
  if (sources.size() != guides.size()) throw DimensionError("need one guide per source");
  if (chunk < 1) throw ConfigError("chunk must be >= 1");
  Shape shape = pool.images.shape();
  shape[0] = static_cast<int64_t>(sources.size());
  AttackResult all;
  all.x_adv = Tensor(shape);
  for (size_t at = 0; at < sources.size(); at += static_cast<size_t>(chunk)) {
    const size_t len = std::min(sources.size() - at, static_cast<size_t>(chunk));
    AttackBatch b;
    auto src = sources.subspan(at, len);
    b.sources = pool.gather(src);
    b.guides = pool.gather(guides.subspan(at, len));
    b.ids.assign(src.begin(), src.end());
    if (pool.has_labels()) b.labels = pool.gather_labels(src);
    append_result(all, run_attack(s, b, cfg), static_cast<int64_t>(at));
  }
  return all;
}

}  // namespace LBBA_PRECISION_NS
}  // namespace lbba
