// Acceptance checks. Usage: lbba_acceptance <id>... (ids 1 2 3 4 5 6 7a 7b 8,
// or "all"). Prints one PASS/FAIL/SKIP line per criterion. Exit status: 0 all
// passed, 1 any failure, 77 everything requested was skipped.
//
// Criteria 5, 6, 7b and 8 need the CIFAR-10 binaries under LBBA_DATA_DIR.
// LBBA_BENCH_DIR moves their run directory, LBBA_BENCH_CONFIG their config.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "gradcheck_cmd.hpp"
#include "lbba/attack.hpp"
#include "lbba/data.hpp"
#include "lbba/errors.hpp"
#include "lbba/eval.hpp"
#include "lbba/nets.hpp"
#include "lbba/ops.hpp"
#include "lbba/train.hpp"
#include "pipeline.hpp"
#include "run_config.hpp"

using namespace lbba;
namespace fs = std::filesystem;

namespace {

enum class Status { pass, fail, skip };

struct Outcome {
  Status status;
  std::string detail;
};

Outcome pass(const std::string& d) { return {Status::pass, d}; }
Outcome fail(const std::string& d) { return {Status::fail, d}; }
Outcome skip(const std::string& d) { return {Status::skip, d}; }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

Tensor random_image(Shape shape, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<real> d(0, 1);
  for (auto& v : t.data()) v = d(rng);
  return t;
}

double worst_excess(const Tensor& x, const Tensor& src, double eps, Norm norm) {
  double worst = -1e300;
  for (double n : sample_norms(sub(x, src), norm)) worst = std::max(worst, n - eps);
  return worst;
}

bool in_box(const Tensor& x) {
  for (real v : x.data())
    if (!(v >= 0.0f && v <= 1.0f)) return false;
  return true;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::memcmp(a.ptr(), b.ptr(), sizeof(real) * a.numel()) == 0;
}

fs::path cifar_root() {
  const char* env = std::getenv("LBBA_DATA_DIR");
  if (!env || !*env || !has_cifar10_binary(env)) return {};
  return env;
}

// ---------------------------------------------------------------------------

Outcome gradients() {
  cli::GradcheckOptions opt;
  std::ostringstream log;
  const auto t0 = std::chrono::steady_clock::now();
  const int rc = cli::run_gradcheck(opt, log);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::string last, line;
  std::istringstream in(log.str());
  while (std::getline(in, line)) last = line;
  const std::string detail = last + ", " + fmt("%.1f", secs) + "s";
  if (rc != 0) return fail(detail);
  if (secs >= 120.0) return fail(detail + " exceeds 120s");
  return pass(detail);
}

Outcome error_transform() {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> hidden(4, 32), chans(1, 3), side(2, 6);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    NetworkSpec s;
    s.family = Family::mlp;
    s.channels = chans(rng);
    s.height = s.width = side(rng);
    s.hidden = {hidden(rng), hidden(rng)};
    Model m = build(s, static_cast<uint64_t>(trial));
    const int d = s.channels * s.height * s.width;
    Tensor x = random_image({3, s.channels, s.height, s.width}, rng);
    Tensor a({d, d});
    std::uniform_real_distribution<real> ad(-1.0f / d, 1.0f / d);
    for (auto& v : a.data()) v = ad(rng);
    for (TruncationPoint p : m.points()) {
      if (p == TruncationPoint::input) continue;
      worst = std::max(worst, verify_error_transform_identity(m, x, a, p));
    }
  }
  const std::string detail = "50 instances, max abs diff " + fmt("%.3e", worst);
  return worst < 1e-5 ? pass(detail) : fail(detail);
}

Outcome constraints() {
  std::vector<Surrogate> nets;
  for (Family f : {Family::simplified_resnet18, Family::vgg_slim, Family::senet_slim}) {
    NetworkSpec s;
    s.family = f;
    s.height = s.width = 8;
    s.num_classes = 5;
    s.widths = {4, 8, 8, 8};
    nets.emplace_back(build(s, static_cast<uint64_t>(nets.size()) + 1));
  }
  SyntheticSpec ds;
  ds.classes = 5;
  ds.n_per_class = 4;
  ds.height = ds.width = 8;
  const SampleSet pool = make_synthetic(ds);

  const std::vector<Surface> surfaces = {Surface::deep, Surface::shallow, Surface::etf, Surface::etf_all,
                                         Surface::etf_weight};
  const std::vector<Method> methods = {Method::pgd, Method::mi, Method::di, Method::ti};
  std::mt19937_64 rng(7);
  auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  auto pick = [&](int n) { return static_cast<int>(rng() % static_cast<uint64_t>(n)); };

  auto random_config = [&](const Surrogate& s) {
    AttackConfig c;
    c.surface = surfaces[pick(5)];
    c.method = methods[pick(4)];
    c.norm = pick(2) ? Norm::linf : Norm::l2;
    c.eps = c.norm == Norm::linf ? uni(0.005, 0.2) : uni(0.05, 3.0);
    c.steps = 1 + pick(4);
    c.inner_steps = 1 + pick(3);
    c.tau = c.eps * uni(0.0, 1.0);
    if (pick(3) == 0) c.tau_norm = pick(2) ? Norm::linf : Norm::l2;
    if (c.surface != Surface::deep) c.metric = pick(2) ? Metric::mse : Metric::contrastive_cos;
    std::vector<TruncationPoint> layers;
    for (auto p : s.model().points())
      if (p != TruncationPoint::input && p != TruncationPoint::fc && p != TruncationPoint::pool) layers.push_back(p);
    c.layer = layers[static_cast<size_t>(pick(static_cast<int>(layers.size())))];
    c.seed = rng();
    return c;
  };
  auto random_batch = [&](uint64_t seed) {
    const int n = 1 + pick(3);
    std::vector<int64_t> src;
    while (static_cast<int>(src.size()) < n) {
      const int64_t i = pick(static_cast<int>(pool.size()));
      if (std::find(src.begin(), src.end(), i) == src.end()) src.push_back(i);
    }
    AttackBatch b;
    b.sources = pool.gather(src);
    b.labels = pool.gather_labels(src);
    b.guides = pool.gather(select_guides(src, pool, GuideStrategy::random_diff_label, seed));
    b.ids = src;
    return b;
  };

  int runs = 0, violations = 0, identity_fail = 0, tau0_fail = 0;
  double worst_eps = -1e300, worst_tau = -1e300;
  // 800 constraint runs, 100 eps = 0 runs, 100 tau = 0 versus shallow pairs.
  for (int r = 0; r < 800; ++r, ++runs) {
    const Surrogate& s = nets[static_cast<size_t>(pick(3))];
    const AttackConfig c = random_config(s);
    const AttackBatch b = random_batch(c.seed);
    run_attack(s, b, c, [&](const StepView& v) {
      const double e = worst_excess(*v.iterate, *v.sources, c.eps, c.norm);
      worst_eps = std::max(worst_eps, e);
      worst_tau = std::max(worst_tau, v.delta_excess);
      if (e > 1e-6 || v.delta_excess > 1e-6 || !in_box(*v.iterate)) ++violations;
    });
  }
  for (int r = 0; r < 100; ++r, ++runs) {
    const Surrogate& s = nets[static_cast<size_t>(pick(3))];
    AttackConfig c = random_config(s);
    c.eps = 0.0;
    c.tau.reset();
    const AttackBatch b = random_batch(c.seed);
    if (!bit_equal(run_attack(s, b, c).x_adv, b.sources)) ++identity_fail;
  }
  for (int r = 0; r < 100; ++r, ++runs) {
    const Surrogate& s = nets[static_cast<size_t>(pick(3))];
    AttackConfig etf = random_config(s);
    etf.surface = Surface::etf;
    etf.tau = 0.0;
    if (!etf.metric) etf.metric = Metric::mse;
    AttackConfig shallow = etf;
    shallow.surface = Surface::shallow;
    shallow.tau.reset();
    const AttackBatch b = random_batch(etf.seed);
    const auto a = run_attack(s, b, etf), z = run_attack(s, b, shallow);
    if (!bit_equal(a.x_adv, z.x_adv) || a.trace.objective != z.trace.objective) ++tau0_fail;
  }
  const std::string detail = std::to_string(runs) + " runs; eps-ball excess " + fmt("%.2e", worst_eps) +
                             ", tau-ball excess " + fmt("%.2e", std::max(worst_tau, 0.0)) + ", " +
                             std::to_string(violations) + " violating steps, " + std::to_string(identity_fail) +
                             "/100 eps=0 mismatches, " + std::to_string(tau0_fail) + "/100 tau=0 mismatches";
  return violations == 0 && identity_fail == 0 && tau0_fail == 0 ? pass(detail) : fail(detail);
}

Outcome white_box() {
  SampleSet few_shot;
  std::string source;
  if (const fs::path root = cifar_root(); !root.empty()) {
    few_shot = sample_few_shot(load_cifar10_binary(root).second, {10, 0}, 0);
    source = "CIFAR-10 test, 10/class";
  } else {
    SyntheticSpec ds;
    ds.classes = 10;
    ds.n_per_class = 10;
    few_shot = make_synthetic(ds);
    source = "synthetic 32x32, 10/class";
  }
  NetworkSpec spec;
  spec.channels = few_shot.channels();
  spec.height = few_shot.height();
  spec.width = few_shot.width();
  spec.num_classes = few_shot.class_count;
  spec.widths = {16, 32, 64, 128};
  Model m = build(spec, 0);
  TrainConfig t;
  t.epochs = 60;
  t.batch_size = 25;
  t.lr_start = 0.1;
  t.lr_end = 0.002;
  train_supervised(m, few_shot, t);
  Surrogate s(m);
  const double clean = top1_accuracy(s.model(), few_shot.images, few_shot.labels);
  AttackConfig c;
  c.surface = Surface::deep;
  c.eps = 0.1;
  c.steps = 50;
  const auto res = generate_adversarial_set(s, few_shot, c);
  const double adv = top1_accuracy(s.model(), res.x_adv, few_shot.labels);
  const std::string detail =
      source + ", surrogate clean " + fmt("%.1f", clean) + "% -> Deep-PGD " + fmt("%.1f", adv) + "% (limit 5%)";
  return adv <= 5.0 ? pass(detail) : fail(detail);
}

Outcome l2_projection() {
  std::mt19937_64 rng(99);
  const int64_t n = 3 * 32 * 32;
  const double eps = l2_budget(n);
  double worst = -1e300, boundary_gap = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    Tensor src = random_image({4, 3, 32, 32}, rng);
    Tensor x = src.clone();
    std::normal_distribution<real> d(0, 0.5f);
    for (auto& v : x.data()) v += d(rng);
    Tensor p = project(x, src, eps, Norm::l2);
    if (!in_box(p)) return fail("projection left the [0,1] box");
    worst = std::max(worst, worst_excess(p, src, eps, Norm::l2));
    // Interior sources with a small push: the box is inactive, so the
    // projection lands on the sphere.
    Tensor mid = Tensor({1, 3, 32, 32}, 0.5f);
    Tensor push = mid.clone();
    std::normal_distribution<real> small(0, 0.08f);
    for (auto& v : push.data()) v += small(rng);
    const double norm_before = sample_norms(sub(push, mid), Norm::l2)[0];
    if (norm_before > eps) {
      bool interior = true;
      Tensor q = project(push, mid, eps, Norm::l2);
      for (real v : q.data()) interior &= v > 0.0f && v < 1.0f;
      if (interior) boundary_gap = std::max(boundary_gap, std::abs(sample_norms(sub(q, mid), Norm::l2)[0] - eps));
    }
  }
  // ETF-PGD l2 iterates on a 32x32 surrogate.
  NetworkSpec spec;
  spec.widths = {8, 16, 16, 16};
  Surrogate s(build(spec, 3));
  SyntheticSpec ds;
  ds.classes = 10;
  ds.n_per_class = 1;
  const SampleSet pool = make_synthetic(ds);
  AttackConfig c;
  c.norm = Norm::l2;
  c.eps = eps;
  c.steps = 10;
  c.inner_steps = 2;
  double attack_worst = -1e300;
  std::vector<int64_t> idx(10);
  for (int i = 0; i < 10; ++i) idx[static_cast<size_t>(i)] = i;
  AttackBatch b{pool.gather(idx), pool.gather_labels(idx),
                pool.gather(select_guides(idx, pool, GuideStrategy::random_diff_label, 0)), idx};
  run_attack(s, b, c, [&](const StepView& v) {
    attack_worst = std::max(attack_worst, worst_excess(*v.iterate, *v.sources, eps, Norm::l2));
  });
  const double w = std::max(worst, attack_worst);
  const std::string detail = "eps2 = " + fmt("%.4f", eps) + "; max norm excess " + fmt("%.2e", w) +
                             ", boundary gap " + fmt("%.2e", boundary_gap);
  return w <= 1e-6 && boundary_gap <= 1e-5 ? pass(detail) : fail(detail);
}

// ---------------------------------------------------------------------------
// CIFAR-10 bench (criteria 5, 6, 7b, 8).

struct Bench {
  fs::path dir;
  cli::RunConfig cfg;
};

std::optional<Bench> bench() {
  if (cifar_root().empty()) return std::nullopt;
  Bench b;
  const char* dir = std::getenv("LBBA_BENCH_DIR");
  b.dir = dir && *dir ? fs::path(dir) : fs::path(LBBA_BENCH_DEFAULT_DIR);
  const char* config = std::getenv("LBBA_BENCH_CONFIG");
  b.cfg = cli::RunConfig::load(config && *config ? fs::path(config) : fs::path(LBBA_CIFAR_CONFIG));
  b.cfg.set("output.dir", b.dir.string());
  b.cfg.set("evaluate.seeds", "0,1,2");
  return b;
}

void log_line(const std::string& s) { std::cerr << "[bench] " << s << "\n"; }

TargetRegistry ensure_targets(cli::Pipeline& p) {
  try {
    return p.load_targets();
  } catch (const DataError&) {
    return p.train_targets();
  }
}

const char* kNoCifar = "CIFAR-10 binaries not found under LBBA_DATA_DIR";

Outcome reproduction() {
  auto b = bench();
  if (!b) return skip(kNoCifar);
  cli::Pipeline p(b->cfg, log_line);
  const TargetRegistry targets = ensure_targets(p);
  std::string weak;
  for (const auto& e : targets.entries())
    if (e.clean_test_acc.value_or(0.0) < 80.0) weak += " " + e.name + "=" + fmt("%.2f", *e.clean_test_acc);
  p.surrogate(p.configured_variant(), true);
  const EvaluationReport rep = p.evaluate();
  const double deep = rep.attack_average("Deep-PGD"), shallow = rep.attack_average("Shallow-PGD"),
               etf = rep.attack_average("ETF-PGD"), clean = rep.clean_average();
  const std::string detail = "clean " + fmt("%.2f", clean) + ", Deep " + fmt("%.2f", deep) + ", Shallow " +
                             fmt("%.2f", shallow) + ", ETF " + fmt("%.2f", etf) +
                             (weak.empty() ? "" : "; targets below 80% test accuracy:" + weak);
  const bool ok = weak.empty() && etf <= shallow - 3.0 && shallow <= deep - 10.0 && etf <= 40.0 && clean >= 80.0;
  return ok ? pass(detail) : fail(detail);
}

Outcome ablations() {
  auto b = bench();
  if (!b) return skip(kNoCifar);
  b->cfg.set("sweep.samples", "10,1000");
  b->cfg.set("sweep.layers", "block1,fc");
  cli::Pipeline p(b->cfg, log_line);
  ensure_targets(p);
  const EvaluationReport ab = p.ablate();
  const SweepResult layers = p.sweep_layers();
  const SweepResult samples = p.sweep_samples();
  const double base = ab.attack_average("baseline"), noaug = ab.attack_average("no-aug"),
               con = ab.attack_average("contrastive"), rot = ab.attack_average("rotation"),
               weight = ab.attack_average("weight-space"), clean = ab.clean_average();
  auto point = [](const SweepResult& s, const std::string& label) {
    for (const auto& pt : s.points)
      if (pt.label == label) return pt.avg_adv;
    throw ConfigError("missing sweep point " + label);
  };
  const double block1 = point(layers, "block1"), fc = point(layers, "fc");
  const double n10 = point(samples, "n=10"), n1000 = point(samples, "n=1000");
  std::vector<std::pair<std::string, bool>> parts = {
      {"(a) no-aug " + fmt("%.2f", noaug) + " >= base " + fmt("%.2f", base) + " + 5", noaug >= base + 5.0},
      {"(b) contrastive " + fmt("%.2f", con) + " within 5", std::abs(con - base) <= 5.0},
      {"(c) rotation " + fmt("%.2f", rot) + " within 8 and <= clean " + fmt("%.2f", clean) + " - 25",
       std::abs(rot - base) <= 8.0 && rot <= clean - 25.0},
      {"(d) weight-space " + fmt("%.2f", weight) + " >= base + 3", weight >= base + 3.0},
      {"(e) fc " + fmt("%.2f", fc) + " >= block1 " + fmt("%.2f", block1) + " + 10", fc >= block1 + 10.0},
      {"(f) n=1000 " + fmt("%.2f", n1000) + " < n=10 " + fmt("%.2f", n10), n1000 < n10},
  };
  std::string detail;
  bool ok = true;
  for (const auto& [text, good] : parts) {
    detail += (detail.empty() ? "" : "; ") + text + (good ? " ok" : " FAILED");
    ok &= good;
  }
  return ok ? pass(detail) : fail(detail);
}

Outcome l2_transfer() {
  auto b = bench();
  if (!b) return skip(kNoCifar);
  cli::Pipeline p(b->cfg, log_line);
  const TargetRegistry targets = ensure_targets(p);
  const Surrogate s = p.surrogate(p.configured_variant(), true);
  AttackConfig c = b->cfg.attack();
  c.surface = Surface::etf;
  c.norm = Norm::l2;
  c.eps = l2_budget(3 * 32 * 32);
  c.tau.reset();
  c.step_size.reset();
  c.inner_step_size.reset();
  MatrixOptions opt;
  opt.seeds = b->cfg.seed_list("evaluate.seeds");
  opt.log = log_line;
  const EvaluationReport rep = run_matrix({{"ETF-PGD-l2", &s, c}}, p.eval_pool(), targets, opt);
  const double adv = rep.attack_average("ETF-PGD-l2"), clean = rep.clean_average();
  const std::string detail = "clean " + fmt("%.2f", clean) + ", ETF-PGD l2 " + fmt("%.2f", adv) + " (need drop >= 15)";
  return adv <= clean - 15.0 ? pass(detail) : fail(detail);
}

Outcome determinism() {
  auto b = bench();
  if (!b) return skip(kNoCifar);
  std::map<std::string, std::string> first;
  auto read_all = [](const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const char* f : {"report.json", "report.csv", "summary.csv", "report.md"}) {
      std::ifstream in(dir / f, std::ios::binary);
      std::stringstream ss;
      ss << in.rdbuf();
      out[f] = ss.str();
    }
    return out;
  };
  {
    cli::Pipeline p(b->cfg, log_line);
    ensure_targets(p);
    p.surrogate(p.configured_variant(), true);
    p.evaluate();
    first = read_all(b->dir / "report");
  }
  // Second run: fresh surrogate training into a separate directory that
  // shares the trained targets.
  const fs::path repeat = b->dir / "repeat";
  fs::remove_all(repeat);
  fs::create_directories(repeat);
  fs::copy(b->dir / "targets", repeat / "targets", fs::copy_options::recursive);
  cli::RunConfig cfg = b->cfg;
  cfg.set("output.dir", repeat.string());
  cli::Pipeline p(cfg, log_line);
  p.train_surrogate(p.configured_variant());
  p.evaluate();
  const auto second = read_all(repeat / "report");
  std::string diff;
  for (const auto& [name, bytes] : first)
    if (bytes.empty() || second.at(name) != bytes) diff += " " + name;
  return diff.empty() ? pass("report.json, report.csv, summary.csv, report.md byte-identical across runs")
                      : fail("differs:" + diff);
}

const std::vector<std::pair<std::string, std::function<Outcome()>>>& criteria() {
  static const std::vector<std::pair<std::string, std::function<Outcome()>>> list = {
      {"1", gradients},        {"2", error_transform}, {"3", constraints}, {"4", white_box},
      {"5", reproduction},     {"6", ablations},       {"7a", l2_projection}, {"7b", l2_transfer},
      {"8", determinism},
  };
  return list;
}

const std::map<std::string, std::string>& titles() {
  static const std::map<std::string, std::string> t = {
      {"1", "gradient correctness"},
      {"2", "error-transform identity"},
      {"3", "constraint properties"},
      {"4", "white-box sanity"},
      {"5", "desk-scale transfer ordering"},
      {"6", "ablation directions"},
      {"7a", "l2 projection"},
      {"7b", "l2 transfer"},
      {"8", "determinism"},
  };
  return t;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> wanted(argv + 1, argv + argc);
  if (wanted.empty() || (wanted.size() == 1 && wanted[0] == "all")) {
    wanted.clear();
    for (const auto& [id, fn] : criteria()) wanted.push_back(id);
  }
  int passed = 0, failed = 0, skipped = 0;
  for (const auto& id : wanted) {
    auto it = std::find_if(criteria().begin(), criteria().end(), [&](const auto& c) { return c.first == id; });
    if (it == criteria().end()) {
      std::cerr << "unknown criterion '" << id << "'\n";
      return 2;
    }
    Outcome o;
    try {
      o = it->second();
    } catch (const std::exception& e) {
      o = fail(std::string("error: ") + e.what());
    }
    const char* tag = o.status == Status::pass ? "PASS" : o.status == Status::fail ? "FAIL" : "SKIP";
    std::cout << "criterion " << id << " (" << titles().at(id) << "): " << tag << ": " << o.detail << std::endl;
    (o.status == Status::pass ? passed : o.status == Status::fail ? failed : skipped)++;
  }
  if (failed) return 1;
  if (passed == 0 && skipped) return 77;
  return 0;
}
