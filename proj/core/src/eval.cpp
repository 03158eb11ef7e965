#include "lbba/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "lbba/archive.hpp"
#include "lbba/checkpoint.hpp"
#include "lbba/errors.hpp"
#include "lbba/hash.hpp"
#include "lbba/ops.hpp"

namespace lbba {
inline namespace LBBA_PRECISION_NS {

namespace {

std::string num(double v, const char* format) {
  char buf[64];
  std::snprintf(buf, sizeof buf, format, v);
  return buf;
}

// Shortest text that parses back to the same double.
std::string exact(double v) { return num(v, "%.17g"); }

std::string slug(const std::string& label) {
  std::string out;
  for (char c : label) {
    if (std::isalnum(static_cast<unsigned char>(c))) out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    else if (!out.empty() && out.back() != '-') out += '-';
  }
  while (!out.empty() && out.back() == '-') out.pop_back();
  return out.empty() ? "attack" : out;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

void log_line(const MatrixOptions& opt, const std::string& line) {
  if (opt.log) opt.log(line);
}

}  // namespace

double top1_accuracy(const Model& target, const Tensor& images, std::span<const int> labels, int batch) {
  const int64_t n = images.rank() ? images.dim(0) : 0;
  if (n == 0) throw DataError("top-1 accuracy of an empty set");
  if (static_cast<int64_t>(labels.size()) != n) throw DimensionError("one label per image required");
  if (batch < 1) throw ConfigError("batch must be >= 1");
  Model m = target;
  m.eval();
  NoGradGuard ng;
  const int64_t per = images.numel() / n;
  int64_t correct = 0;
  for (int64_t at = 0; at < n; at += batch) {
    const int64_t len = std::min<int64_t>(batch, n - at);
    Shape s = images.shape();
    s[0] = len;
    Tensor x(s);
    std::copy_n(images.ptr() + at * per, len * per, x.ptr());
    Tensor logits = m.forward_logits(x);
    const int64_t k = logits.dim(1);
    for (int64_t i = 0; i < len; ++i) {
      const real* row = logits.ptr() + i * k;
      if (std::max_element(row, row + k) - row == labels[static_cast<size_t>(at + i)]) ++correct;
    }
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(n);
}

nlohmann::json TargetEntry::to_json() const {
  nlohmann::json j = {{"name", name},
                      {"checkpoint", checkpoint.generic_string()},
                      {"spec_hash", spec_hash},
                      {"dataset", dataset},
                      {"split", split}};
  if (clean_test_acc) j["clean_test_acc"] = *clean_test_acc;
  return j;
}

TargetEntry TargetEntry::from_json(const nlohmann::json& j) {
  TargetEntry e;
  try {
    e.name = j.at("name").get<std::string>();
    e.checkpoint = j.value("checkpoint", std::string());
    e.spec_hash = j.value("spec_hash", std::string());
    e.dataset = j.at("dataset").get<std::string>();
    e.split = j.at("split").get<std::string>();
    if (j.contains("clean_test_acc")) e.clean_test_acc = j.at("clean_test_acc").get<double>();
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(std::string("bad target entry: ") + ex.what());
  }
  return e;
}

void TargetRegistry::add(TargetEntry entry) {
  if (entry.name.empty()) throw ConfigError("target name must not be empty");
  for (const auto& e : entries_)
    if (e.name == entry.name) throw ConfigError("duplicate target name '" + entry.name + "'");
  entries_.push_back(std::move(entry));
}

void TargetRegistry::add(TargetEntry entry, Model model) {
  const std::string name = entry.name;
  if (entry.spec_hash.empty()) entry.spec_hash = model.spec().hash();
  add(std::move(entry));
  model.eval();
  cache_[name] = std::make_shared<Model>(std::move(model));
}

std::vector<std::string> TargetRegistry::names() const {
  std::vector<std::string> out;
  for (const auto& e : entries_) out.push_back(e.name);
  return out;
}

const Model& TargetRegistry::model(const std::string& name) const {
  auto it = cache_.find(name);
  if (it != cache_.end()) return *it->second;
  for (const auto& e : entries_) {
    if (e.name != name) continue;
    if (e.checkpoint.empty()) throw ConfigError("target '" + name + "' has no checkpoint");
    Model m = load_checkpoint(e.checkpoint);
    if (!e.spec_hash.empty() && m.spec().hash() != e.spec_hash) {
      throw ProvenanceError("target '" + name + "' checkpoint does not match its registered spec");
    }
    m.eval();
    return *(cache_[name] = std::make_shared<Model>(std::move(m)));
  }
  throw ConfigError("unknown target '" + name + "'");
}

void TargetRegistry::require_disjoint(const nlohmann::json& few_shot_manifest) const {
  for (const auto& e : entries_) {
    try {
      lbba::require_disjoint(few_shot_manifest, e.dataset, e.split);
    } catch (const ProvenanceError& ex) {
      throw ProvenanceError("target '" + e.name + "': " + ex.what());
    }
  }
}

nlohmann::json TargetRegistry::to_json() const {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : entries_) arr.push_back(e.to_json());
  return {{"targets", arr}};
}

TargetRegistry TargetRegistry::from_json(const nlohmann::json& j, const std::filesystem::path& base) {
  TargetRegistry r;
  if (!j.contains("targets") || !j.at("targets").is_array()) throw ConfigError("registry needs a 'targets' array");
  for (const auto& item : j.at("targets")) {
    TargetEntry e = TargetEntry::from_json(item);
    if (!e.checkpoint.empty() && e.checkpoint.is_relative() && !base.empty()) e.checkpoint = base / e.checkpoint;
    r.add(std::move(e));
  }
  return r;
}

void TargetRegistry::save(const std::filesystem::path& path) const { write_text(path, to_json().dump(2) + "\n"); }

TargetRegistry TargetRegistry::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read target registry " + path.string());
  try {
    return from_json(nlohmann::json::parse(in), path.parent_path());
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("target registry " + path.string() + ": " + e.what());
  }
}

std::vector<ReportCell> EvaluationReport::cells() const {
  std::vector<ReportCell> out;
  for (const auto& a : attacks) {
    for (const auto& t : targets) {
      std::vector<double> adv;
      double clean = 0.0;
      for (const auto& r : rows) {
        if (r.attack != a || r.target != t) continue;
        adv.push_back(r.adv_acc);
        clean = r.clean_acc;
      }
      if (adv.empty()) continue;
      ReportCell c{a, t, clean, 0.0, std::nullopt, static_cast<int>(adv.size())};
      c.adv_mean = std::accumulate(adv.begin(), adv.end(), 0.0) / static_cast<double>(adv.size());
      if (adv.size() >= 2) {
        double ss = 0.0;
        for (double v : adv) ss += (v - c.adv_mean) * (v - c.adv_mean);
        c.adv_std = std::sqrt(ss / static_cast<double>(adv.size() - 1));
      }
      out.push_back(c);
    }
  }
  return out;
}

std::optional<ReportCell> EvaluationReport::cell(const std::string& attack, const std::string& target) const {
  for (const auto& c : cells())
    if (c.attack == attack && c.target == target) return c;
  return std::nullopt;
}

double EvaluationReport::attack_average(const std::string& attack) const {
  double total = 0.0;
  int n = 0;
  for (const auto& c : cells()) {
    if (c.attack != attack) continue;
    total += c.adv_mean;
    ++n;
  }
  if (n == 0) throw ConfigError("no rows for attack '" + attack + "'");
  return total / n;
}

std::map<std::string, double> EvaluationReport::clean_by_target() const {
  std::map<std::string, double> out;
  for (const auto& r : rows) out.emplace(r.target, r.clean_acc);
  return out;
}

double EvaluationReport::clean_average() const {
  const auto clean = clean_by_target();
  if (clean.empty()) throw ConfigError("empty report");
  double total = 0.0;
  for (const auto& [t, v] : clean) total += v;
  return total / static_cast<double>(clean.size());
}

void EvaluationReport::merge(const EvaluationReport& other, const std::string& label_prefix) {
  if (targets.empty() && attacks.empty()) {
    targets = other.targets;
    metadata = other.metadata;
    metadata["attacks"] = nlohmann::json::object();
  } else if (targets != other.targets) {
    throw ConfigError("cannot merge reports over different targets");
  }
  for (const auto& a : other.attacks) {
    const std::string label = label_prefix + a;
    if (std::find(attacks.begin(), attacks.end(), label) != attacks.end()) {
      throw ConfigError("duplicate attack label '" + label + "' in merge");
    }
    attacks.push_back(label);
    if (other.metadata.contains("attacks") && other.metadata["attacks"].contains(a)) {
      metadata["attacks"][label] = other.metadata["attacks"][a];
    }
  }
  for (auto r : other.rows) {
    r.attack = label_prefix + r.attack;
    rows.push_back(std::move(r));
  }
  if (other.metadata.contains("warnings")) {
    for (const auto& w : other.metadata["warnings"]) {
      auto& mine = metadata["warnings"];
      if (std::find(mine.begin(), mine.end(), w) == mine.end()) mine.push_back(w);
    }
  }
}

nlohmann::json EvaluationReport::to_json() const {
  nlohmann::json rj = nlohmann::json::array();
  for (const auto& r : rows) {
    rj.push_back({{"attack", r.attack},
                  {"target", r.target},
                  {"seed", r.seed},
                  {"clean_acc", r.clean_acc},
                  {"adv_acc", r.adv_acc}});
  }
  nlohmann::json sj = nlohmann::json::array();
  for (const auto& c : cells()) {
    nlohmann::json cj = {{"attack", c.attack},
                         {"target", c.target},
                         {"clean_acc", c.clean_acc},
                         {"adv_mean", c.adv_mean},
                         {"seeds", c.seeds}};
    if (c.adv_std) cj["adv_std"] = *c.adv_std;
    sj.push_back(cj);
  }
  nlohmann::json averages = nlohmann::json::object();
  for (const auto& a : attacks) averages[a] = attack_average(a);
  return {{"schema_version", kReportSchemaVersion},
          {"metadata", metadata},
          {"targets", targets},
          {"attacks", attacks},
          {"rows", rj},
          {"summary", sj},
          {"averages", averages},
          {"clean_average", rows.empty() ? 0.0 : clean_average()}};
}

EvaluationReport EvaluationReport::from_json(const nlohmann::json& j) {
  EvaluationReport r;
  try {
    if (j.at("schema_version").get<int>() != kReportSchemaVersion) {
      throw DataError("unsupported report schema version");
    }
    r.metadata = j.at("metadata");
    r.targets = j.at("targets").get<std::vector<std::string>>();
    r.attacks = j.at("attacks").get<std::vector<std::string>>();
    for (const auto& row : j.at("rows")) {
      r.rows.push_back({row.at("attack").get<std::string>(), row.at("target").get<std::string>(),
                        row.at("seed").get<uint64_t>(), row.at("clean_acc").get<double>(),
                        row.at("adv_acc").get<double>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("corrupt report: ") + e.what());
  }
  return r;
}

std::string label_slug(const std::string& label) { return slug(label); }

AttackResult generate_adversarial_set(const Surrogate& surrogate, const SampleSet& pool, const AttackConfig& cfg,
                                      int chunk, const std::optional<std::filesystem::path>& archive_dir,
                                      bool export_png) {
  if (!pool.has_labels()) throw DataError("the attack pool needs labels");
  std::vector<int64_t> idx(static_cast<size_t>(pool.size()));
  std::iota(idx.begin(), idx.end(), 0);
  const bool guided = cfg.surface != Surface::deep;
  const std::vector<int64_t> guides =
      guided ? select_guides(idx, pool, cfg.guide, cfg.seed, &surrogate, cfg.layer) : idx;
  AttackResult res = attack_pool(surrogate, pool, idx, guides, cfg, chunk);
  if (archive_dir) {
    AdversarialArchive a;
    a.config = cfg.to_json();
    a.config_hash = cfg.hash();
    a.surrogate_hash = model_hash(surrogate.model());
    a.pool = few_shot_manifest(pool);
    a.seed = cfg.seed;
    a.x_adv = res.x_adv;
    a.sources = idx;
    a.guides = guided ? guides : std::vector<int64_t>(idx.size(), -1);
    a.labels = pool.labels;
    a.final_objective = res.final_objective;
    write_archive(*archive_dir, a, export_png);
  }
  return res;
}

EvaluationReport run_matrix(const std::vector<MatrixEntry>& entries, const SampleSet& pool,
                            const TargetRegistry& targets, const MatrixOptions& opt) {
  if (entries.empty()) throw ConfigError("no attacks to run");
  if (opt.seeds.empty()) throw ConfigError("at least one seed is required");
  if (targets.size() == 0) throw ConfigError("no targets registered");
  if (!pool.has_labels()) throw DataError("the evaluation pool needs labels");
  const nlohmann::json manifest = few_shot_manifest(pool);
  targets.require_disjoint(manifest);

  EvaluationReport rep;
  rep.targets = targets.names();
  rep.metadata = {{"pool", {{"dataset", pool.provenance.dataset},
                            {"split", pool.provenance.split},
                            {"count", pool.size()},
                            {"indices_hash", sha256_hex(manifest.at("indices").dump())}}},
                  {"eval_set", "few-shot"},
                  {"seeds", opt.seeds},
                  {"attacks", nlohmann::json::object()},
                  {"warnings", nlohmann::json::array()}};

  std::map<std::string, double> clean;
  for (const auto& name : rep.targets) {
    clean[name] = top1_accuracy(targets.model(name), pool.images, pool.labels);
    if (clean[name] < opt.sanity_floor) {
      rep.metadata["warnings"].push_back("target '" + name + "' clean accuracy " + num(clean[name], "%.2f") +
                                         " is below the sanity floor " + num(opt.sanity_floor, "%.2f"));
    }
  }

  for (const auto& entry : entries) {
    if (!entry.surrogate) throw ConfigError("attack '" + entry.label + "' has no surrogate");
    if (std::find(rep.attacks.begin(), rep.attacks.end(), entry.label) != rep.attacks.end()) {
      throw ConfigError("duplicate attack label '" + entry.label + "'");
    }
    entry.config.validate();
    rep.attacks.push_back(entry.label);
    nlohmann::json cfg_json = entry.config.to_json();
    cfg_json.erase("seed");
    rep.metadata["attacks"][entry.label] = {{"config", cfg_json},
                                            {"surrogate_hash", model_hash(entry.surrogate->model())}};
    for (uint64_t seed : opt.seeds) {
      AttackConfig cfg = entry.config;
      cfg.seed = seed;
      log_line(opt, entry.label + " seed " + std::to_string(seed) + ": attacking " + std::to_string(pool.size()) +
                        " images");
      std::optional<std::filesystem::path> dir;
      if (opt.archive_dir) dir = *opt.archive_dir / label_slug(entry.label) / ("seed-" + std::to_string(seed));
      AttackResult res = generate_adversarial_set(*entry.surrogate, pool, cfg, opt.chunk, dir, opt.export_png);
      for (const auto& name : rep.targets) {
        const double adv = top1_accuracy(targets.model(name), res.x_adv, pool.labels);
        rep.rows.push_back({entry.label, name, seed, clean[name], adv});
        log_line(opt, "  " + name + ": clean " + num(clean[name], "%.2f") + " adv " + num(adv, "%.2f"));
      }
    }
  }
  return rep;
}

nlohmann::json SweepResult::to_json() const {
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : points) {
    pts.push_back({{"label", p.label}, {"x", p.x}, {"avg_adv", p.avg_adv}, {"per_target", p.per_target}});
  }
  return {{"kind", kind}, {"x_name", x_name}, {"points", pts}, {"report", report.to_json()}};
}

SweepResult SweepResult::from_json(const nlohmann::json& j) {
  SweepResult out;
  try {
    out.kind = j.at("kind").get<std::string>();
    out.x_name = j.at("x_name").get<std::string>();
    for (const auto& p : j.at("points")) {
      out.points.push_back({p.at("label").get<std::string>(), p.at("x").get<double>(), p.at("avg_adv").get<double>(),
                            p.at("per_target").get<std::map<std::string, double>>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("corrupt sweep: ") + e.what());
  }
  out.report = EvaluationReport::from_json(j.at("report"));
  return out;
}

namespace {

SweepPoint point_from(const EvaluationReport& rep, const std::string& label, double x) {
  SweepPoint p;
  p.label = label;
  p.x = x;
  p.avg_adv = rep.attack_average(label);
  for (const auto& c : rep.cells())
    if (c.attack == label) p.per_target[c.target] = c.adv_mean;
  return p;
}

}  // namespace

SweepResult sweep_samples(const std::vector<int>& ns, const SamplesSurrogateFactory& factory, const SampleSet& pool,
                          const TargetRegistry& targets, const AttackConfig& cfg, const MatrixOptions& opt) {
  if (ns.empty()) throw ConfigError("sample sweep needs at least one n");
  std::set<int> seen;
  for (int n : ns) {
    if (n < 1) throw ConfigError("sample counts must be positive");
    if (!seen.insert(n).second) throw ConfigError("duplicate sample count " + std::to_string(n));
  }
  SweepResult out;
  out.kind = "samples";
  out.x_name = "images";
  for (int n : ns) {
    log_line(opt, "sample sweep: n = " + std::to_string(n));
    Surrogate s = factory(n);
    const std::string label = "n=" + std::to_string(n);
    EvaluationReport rep = run_matrix({{label, &s, cfg}}, pool, targets, opt);
    out.points.push_back(point_from(rep, label, n));
    out.report.merge(rep);
  }
  return out;
}

SweepResult sweep_layers(const std::vector<TruncationPoint>& layers, const Surrogate& surrogate,
                         const SampleSet& pool, const TargetRegistry& targets, const AttackConfig& cfg,
                         const MatrixOptions& opt) {
  if (layers.empty()) throw ConfigError("layer sweep needs at least one layer");
  std::set<TruncationPoint> seen;
  std::vector<MatrixEntry> entries;
  for (auto l : layers) {
    if (l == TruncationPoint::input || !surrogate.model().has_point(l)) {
      throw ConfigError("truncation point '" + to_string(l) + "' is not available on the surrogate");
    }
    if (!seen.insert(l).second) throw ConfigError("duplicate layer " + to_string(l));
    AttackConfig c = cfg;
    c.layer = l;
    entries.push_back({to_string(l), &surrogate, c});
  }
  SweepResult out;
  out.kind = "layers";
  out.x_name = "layer";
  out.report = run_matrix(entries, pool, targets, opt);
  for (auto l : layers) out.points.push_back(point_from(out.report, to_string(l), ordinal(l)));
  return out;
}

std::vector<std::string> ablation_labels() {
  return {"baseline", "no-aug", "contrastive", "rotation", "weight-space", "etf-all", "l2"};
}

EvaluationReport run_ablations(const VariantSurrogateFactory& factory, const SampleSet& pool,
                               const TargetRegistry& targets, const AttackConfig& cfg, const MatrixOptions& opt) {
  if (!cfg.has_inner()) throw ConfigError("ablations start from an etf surface");
  AttackConfig base = cfg;
  base.surface = Surface::etf;
  const Surrogate supervised = factory("supervised", true);
  const Surrogate no_aug = factory("supervised", false);
  const Surrogate contrastive = factory("contrastive", true);
  const Surrogate rotation = factory("rotation", true);

  AttackConfig weight = base;
  weight.surface = Surface::etf_weight;
  AttackConfig all = base;
  all.surface = Surface::etf_all;
  AttackConfig l2 = base;
  l2.norm = Norm::l2;
  l2.tau_norm.reset();
  l2.eps = l2_budget(static_cast<int64_t>(pool.channels()) * pool.height() * pool.width());
  if (base.tau) l2.tau = *base.tau * l2.eps / base.eps;
  l2.step_size.reset();
  l2.inner_step_size.reset();

  const auto labels = ablation_labels();
  std::vector<MatrixEntry> entries = {{labels[0], &supervised, base}, {labels[1], &no_aug, base},
                                      {labels[2], &contrastive, base}, {labels[3], &rotation, base},
                                      {labels[4], &supervised, weight}, {labels[5], &supervised, all},
                                      {labels[6], &supervised, l2}};
  return run_matrix(entries, pool, targets, opt);
}

std::string report_csv(const EvaluationReport& report) {
  std::string out = "attack,target,seed,clean_acc,adv_acc\n";
  for (const auto& r : report.rows) {
    out += csv_field(r.attack) + "," + csv_field(r.target) + "," + std::to_string(r.seed) + "," +
           exact(r.clean_acc) + "," + exact(r.adv_acc) + "\n";
  }
  return out;
}

std::string summary_csv(const EvaluationReport& report) {
  std::string out = "attack,target,clean_acc,adv_mean,adv_std,seeds\n";
  for (const auto& c : report.cells()) {
    out += csv_field(c.attack) + "," + csv_field(c.target) + "," + exact(c.clean_acc) + "," + exact(c.adv_mean) +
           "," + (c.adv_std ? exact(*c.adv_std) : "") + "," + std::to_string(c.seeds) + "\n";
  }
  return out;
}

std::string report_markdown(const EvaluationReport& report) {
  std::ostringstream md;
  md << "| Attack |";
  for (const auto& t : report.targets) md << " " << t << " |";
  md << " Average |\n|---|";
  for (size_t i = 0; i < report.targets.size(); ++i) md << "---:|";
  md << "---:|\n";
  const auto clean = report.clean_by_target();
  md << "| Clean |";
  for (const auto& t : report.targets) {
    auto it = clean.find(t);
    md << " " << (it == clean.end() ? std::string("-") : num(it->second, "%.2f")) << " |";
  }
  md << " " << (report.rows.empty() ? std::string("-") : num(report.clean_average(), "%.2f")) << " |\n";
  const auto cells = report.cells();
  for (const auto& a : report.attacks) {
    md << "| " << a << " |";
    for (const auto& t : report.targets) {
      auto it = std::find_if(cells.begin(), cells.end(),
                             [&](const ReportCell& c) { return c.attack == a && c.target == t; });
      if (it == cells.end()) {
        md << " - |";
        continue;
      }
      md << " " << num(it->adv_mean, "%.2f");
      if (it->adv_std) md << " ± " << num(*it->adv_std, "%.2f");
      md << " |";
    }
    md << " " << num(report.attack_average(a), "%.2f") << " |\n";
  }
  return md.str();
}

std::string sweep_svg(const SweepResult& sweep) {
  constexpr double W = 480, H = 320, L = 60, R = 20, T = 30, B = 50;
  const size_t n = sweep.points.size();
  double lo = 100.0, hi = 0.0;
  for (const auto& p : sweep.points) {
    lo = std::min(lo, p.avg_adv);
    hi = std::max(hi, p.avg_adv);
  }
  lo = std::max(0.0, std::floor(lo / 10.0) * 10.0);
  hi = std::min(100.0, std::ceil(hi / 10.0) * 10.0);
  if (hi <= lo) hi = std::min(100.0, lo + 10.0);
  if (hi <= lo) lo = hi - 10.0;
  auto px = [&](size_t i) { return n <= 1 ? L + (W - L - R) / 2 : L + (W - L - R) * static_cast<double>(i) / (n - 1); };
  auto py = [&](double v) { return T + (H - T - B) * (1.0 - (v - lo) / (hi - lo)); };
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"480\" height=\"320\" font-family=\"sans-serif\" "
       "font-size=\"11\">\n";
  s << "<rect width=\"480\" height=\"320\" fill=\"white\"/>\n";
  s << "<text x=\"240\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">Average adversarial accuracy vs "
    << sweep.x_name << "</text>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
    << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double v = lo + (hi - lo) * k / 4.0;
    s << "<text x=\"" << L - 6 << "\" y=\"" << num(py(v) + 4, "%.1f") << "\" text-anchor=\"end\">"
      << num(v, "%.0f") << "</text>\n";
  }
  std::string poly;
  for (size_t i = 0; i < n; ++i) {
    const auto& p = sweep.points[i];
    poly += num(px(i), "%.1f") + "," + num(py(p.avg_adv), "%.1f") + " ";
    s << "<circle cx=\"" << num(px(i), "%.1f") << "\" cy=\"" << num(py(p.avg_adv), "%.1f")
      << "\" r=\"3\" fill=\"#1f77b4\"/>\n";
    s << "<text x=\"" << num(px(i), "%.1f") << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << p.label
      << "</text>\n";
  }
  if (!poly.empty()) poly.pop_back();
  s << "<polyline points=\"" << poly << "\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\"/>\n";
  s << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">" << sweep.x_name
    << "</text>\n";
  s << "</svg>\n";
  return s.str();
}

void emit_report(const EvaluationReport& report, const std::filesystem::path& dir,
                 const std::set<std::string>& formats) {
  for (const auto& f : formats) {
    if (f != "csv" && f != "md" && f != "json" && f != "svg") throw ConfigError("unknown report format '" + f + "'");
  }
  std::filesystem::create_directories(dir);
  if (formats.count("csv")) {
    write_text(dir / "report.csv", report_csv(report));
    write_text(dir / "summary.csv", summary_csv(report));
  }
  if (formats.count("md")) write_text(dir / "report.md", report_markdown(report));
  if (formats.count("json")) write_text(dir / "report.json", report.to_json().dump(2) + "\n");
}

void emit_sweep(const SweepResult& sweep, const std::filesystem::path& dir, const std::set<std::string>& formats) {
  emit_report(sweep.report, dir, formats);
  if (formats.count("json")) write_text(dir / "sweep.json", sweep.to_json().dump(2) + "\n");
  if (formats.count("csv")) {
    std::string csv = "label,x,avg_adv\n";
    for (const auto& p : sweep.points) csv += csv_field(p.label) + "," + exact(p.x) + "," + exact(p.avg_adv) + "\n";
    write_text(dir / "sweep.csv", csv);
  }
  if (formats.count("svg")) write_text(dir / ("sweep-" + sweep.kind + ".svg"), sweep_svg(sweep));
}

}  // namespace LBBA_PRECISION_NS
}  // namespace lbba
