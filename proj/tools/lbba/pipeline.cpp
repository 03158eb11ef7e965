#include "pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>

#include "lbba/checkpoint.hpp"
#include "lbba/errors.hpp"
#include "lbba/hash.hpp"
#include "lbba/train.hpp"

#ifndef LBBA_VERSION
#define LBBA_VERSION "unknown"
#endif

namespace lbba::cli {

namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

std::string manifest_hash(const nlohmann::json& manifest) { return sha256_hex(manifest.dump()); }

std::set<std::string> format_set(const std::vector<std::string>& v) { return {v.begin(), v.end()}; }

std::string epoch_line(const std::string& what, const HistoryRow& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%s epoch %d lr %.5f loss %.4f acc %.2f", what.c_str(), r.epoch, r.lr, r.loss, r.acc);
  return buf;
}

}  // namespace

DirLock::DirLock(const fs::path& run_dir) : path_(run_dir / ".lock") {
  fs::create_directories(run_dir);
  if (!fs::create_directory(path_)) {
    throw Error(ErrorKind::unsupported, "run directory " + run_dir.string() +
                                            " is locked by another writer (remove " + path_.string() +
                                            " if no other process is running)");
  }
}

DirLock::~DirLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

std::string SurrogateVariant::name() const {
  std::string s = objective;
  if (!augmentation) s += "-noaug";
  s += request.n_total > 0 ? "-n" + std::to_string(request.n_total) : "-pc" + std::to_string(request.n_per_class);
  return s;
}

Pipeline::Pipeline(RunConfig cfg, Logger log) : cfg_(std::move(cfg)), log_(std::move(log)) { cfg_.validate(); }

void Pipeline::note(const std::string& line) const {
  if (log_) log_(line);
}

const Datasets& Pipeline::data() {
  if (data_) return *data_;
  Datasets d;
  if (cfg_.get("data.source") == "cifar10") {
    const fs::path root = cfg_.data_root();
    if (root.empty() || !has_cifar10_binary(root)) {
      throw DataError("CIFAR-10 binaries not found" + (root.empty() ? std::string() : " under " + root.string()) +
                      "; set LBBA_DATA_DIR or data.root");
    }
    note("loading CIFAR-10 from " + root.string());
    std::tie(d.train, d.test) = load_cifar10_binary(root);
  } else {
    SyntheticSpec spec;
    spec.classes = cfg_.integer("data.synthetic_classes");
    spec.height = spec.width = cfg_.integer("data.synthetic_size");
    spec.pattern_seed = cfg_.unsigned_integer("data.synthetic_seed");
    spec.n_per_class = cfg_.integer("data.synthetic_train_per_class");
    spec.sample_seed = 2 * spec.pattern_seed;
    spec.split = "train";
    d.train = make_synthetic(spec);
    spec.n_per_class = cfg_.integer("data.synthetic_test_per_class");
    spec.sample_seed = 2 * spec.pattern_seed + 1;
    spec.split = "test";
    d.test = make_synthetic(spec);
  }
  data_ = std::move(d);
  return *data_;
}

SampleSet Pipeline::draw(const FewShotRequest& request) {
  const auto& d = data();
  const SampleSet& split = cfg_.get("few_shot.split") == "train" ? d.train : d.test;
  return sample_few_shot(split, request, cfg_.unsigned_integer("few_shot.seed"));
}

const SampleSet& Pipeline::few_shot() {
  if (!few_shot_) few_shot_ = draw(cfg_.few_shot_request());
  return *few_shot_;
}

const SampleSet& Pipeline::eval_pool() {
  if (eval_pool_) return *eval_pool_;
  if (cfg_.get("few_shot.eval_set") == "same") {
    eval_pool_ = few_shot();
    return *eval_pool_;
  }
  const auto& d = data();
  const SampleSet& split = cfg_.get("few_shot.split") == "train" ? d.train : d.test;
  std::set<int64_t> used(few_shot().provenance.indices.begin(), few_shot().provenance.indices.end());
  std::vector<int64_t> rest;
  for (int64_t i = 0; i < split.size(); ++i)
    if (!used.count(i)) rest.push_back(i);
  FewShotRequest r;
  r.n_per_class = cfg_.integer("few_shot.eval_n_per_class");
  eval_pool_ = sample_few_shot(split.subset(rest), r, cfg_.unsigned_integer("few_shot.seed") + 1);
  return *eval_pool_;
}

nlohmann::json Pipeline::few_shot_manifest() { return lbba::few_shot_manifest(few_shot()); }

void Pipeline::describe(const fs::path& dir, const std::string& command, const nlohmann::json& inputs) const {
  nlohmann::json j = {{"command", command}, {"version", LBBA_VERSION}, {"config", cfg_.to_json()}, {"inputs", inputs}};
  write_text(dir / "run.json", j.dump(2) + "\n");
  write_text(dir / "config.ini", cfg_.to_ini());
}

TargetRegistry Pipeline::train_targets() {
  const auto& d = data();
  const nlohmann::json manifest = few_shot_manifest();
  const fs::path dir = run_dir() / "targets";
  fs::create_directories(dir);
  write_manifest(run_dir() / "few_shot.json", manifest);
  TargetRegistry registry;
  const auto families = cfg_.target_families();
  const TargetTrainConfig base = cfg_.target_train();
  const double floor = cfg_.number("targets.min_clean_acc");
  nlohmann::json inputs = {{"few_shot_hash", manifest_hash(manifest)}, {"targets", nlohmann::json::object()}};
  for (size_t i = 0; i < families.size(); ++i) {
    NetworkSpec spec;
    spec.family = families[i];
    spec.channels = d.train.channels();
    spec.height = d.train.height();
    spec.width = d.train.width();
    spec.num_classes = d.train.class_count;
    const int divisor = cfg_.integer("targets.width_divisor");
    for (int w : spec.resolved_widths()) spec.widths.push_back(std::max(1, w / divisor));
    const std::string name = to_string(families[i]);
    TargetTrainConfig t = base;
    t.seed = base.seed + i;
    Model model = build(spec, t.seed);
    note("training target " + name);
    auto history =
        train_target(model, d.train, t, &manifest, [&](const HistoryRow& r) { note(epoch_line(name, r)); });
    const double clean = top1_accuracy(model, d.test.images, d.test.labels);
    note(name + ": clean test accuracy " + std::to_string(clean));
    if (clean < floor) note("warning: " + name + " is below targets.min_clean_acc");
    save_checkpoint(model, dir / (name + ".lbt"),
                    {{"role", "target"},
                     {"dataset", d.train.provenance.dataset},
                     {"split", d.train.provenance.split},
                     {"clean_test_acc", clean}});
    write_history_jsonl(dir / (name + ".history.jsonl"), history);
    TargetEntry e;
    e.name = name;
    e.checkpoint = name + ".lbt";
    e.spec_hash = spec.hash();
    e.dataset = d.train.provenance.dataset;
    e.split = d.train.provenance.split;
    e.clean_test_acc = clean;
    registry.add(e);
    inputs["targets"][name] = model_hash(model);
  }
  registry.save(dir / "registry.json");
  describe(dir, "train-targets", inputs);
  return TargetRegistry::load(dir / "registry.json");
}

TargetRegistry Pipeline::load_targets() const {
  const fs::path path = run_dir() / "targets" / "registry.json";
  if (!fs::exists(path)) throw DataError("no target registry at " + path.string() + "; run train-targets first");
  return TargetRegistry::load(path);
}

SurrogateVariant Pipeline::configured_variant() const {
  SurrogateVariant v;
  v.objective = cfg_.get("surrogate.objective");
  v.augmentation = cfg_.flag("surrogate.augmentation");
  v.request = cfg_.few_shot_request();
  return v;
}

fs::path Pipeline::surrogate_path(const SurrogateVariant& v) const {
  return run_dir() / "surrogates" / (v.name() + ".lbt");
}

Surrogate Pipeline::train_surrogate(const SurrogateVariant& v) {
  const SampleSet set = draw(v.request);
  const nlohmann::json manifest = lbba::few_shot_manifest(set);
  NetworkSpec spec = cfg_.surrogate_spec(set.channels(), set.height(), set.width(), set.class_count);
  TrainConfig t = cfg_.surrogate_train();
  t.augmentation.enabled = v.augmentation;
  Model model = build(spec, t.seed);
  note("training surrogate " + v.name() + " on " + std::to_string(set.size()) + " images");
  const auto on_epoch = [&](const HistoryRow& r) { note(epoch_line(v.name(), r)); };
  std::vector<HistoryRow> history;
  if (v.objective == "supervised") history = train_supervised(model, set, t, on_epoch);
  else if (v.objective == "contrastive") history = train_contrastive(model, set, t, on_epoch);
  else if (v.objective == "rotation") history = train_rotation(model, set, t, on_epoch);
  else throw ConfigError("unknown surrogate objective '" + v.objective + "'");
  nlohmann::json training = cfg_.to_json()["surrogate"];
  training["objective"] = v.objective;
  training["augmentation"] = v.augmentation ? "true" : "false";
  const fs::path path = surrogate_path(v);
  fs::create_directories(path.parent_path());
  save_checkpoint(model, path,
                  {{"role", "surrogate"},
                   {"variant", v.name()},
                   {"few_shot_hash", manifest_hash(manifest)},
                   {"few_shot", manifest},
                   {"training", training}});
  write_history_jsonl(path.parent_path() / (v.name() + ".history.jsonl"), history);
  describe(path.parent_path(), "train-surrogate",
           {{"variant", v.name()}, {"few_shot_hash", manifest_hash(manifest)}, {"surrogate_hash", model_hash(model)}});
  return Surrogate(std::move(model));
}

Surrogate Pipeline::surrogate(const SurrogateVariant& v, bool train_if_missing) {
  const fs::path path = surrogate_path(v);
  if (!fs::exists(path)) {
    if (train_if_missing) return train_surrogate(v);
    throw DataError("no surrogate at " + path.string() + "; run train-surrogate first");
  }
  const auto header = read_checkpoint_header(path);
  const auto prov = header.value("provenance", nlohmann::json::object());
  const std::string expected = manifest_hash(lbba::few_shot_manifest(draw(v.request)));
  nlohmann::json training = cfg_.to_json()["surrogate"];
  training["objective"] = v.objective;
  training["augmentation"] = v.augmentation ? "true" : "false";
  const bool same_data = prov.value("few_shot_hash", std::string()) == expected;
  const bool same_training = prov.value("training", nlohmann::json()) == training;
  if (!same_data || !same_training) {
    if (train_if_missing) return train_surrogate(v);
    if (!same_data) throw ProvenanceError("surrogate " + path.string() + " was trained on a different sample set");
    throw ConfigError("surrogate " + path.string() + " was trained with different settings; rerun train-surrogate");
  }
  return Surrogate(load_checkpoint(path));
}

MatrixOptions Pipeline::matrix_options(const std::optional<fs::path>& archive_dir) const {
  MatrixOptions opt;
  opt.seeds = cfg_.seed_list("evaluate.seeds");
  opt.chunk = cfg_.integer("attack.chunk");
  opt.sanity_floor = cfg_.number("evaluate.sanity_floor");
  opt.archive_dir = archive_dir;
  opt.export_png = cfg_.flag("evaluate.export_png");
  opt.log = log_;
  return opt;
}

std::vector<AttackResult> Pipeline::attack() {
  const SurrogateVariant v = configured_variant();
  const Surrogate s = surrogate(v, false);
  const SampleSet& pool = eval_pool();
  AttackConfig cfg = cfg_.attack();
  std::vector<AttackResult> out;
  const fs::path dir = run_dir() / "attacks" / label_slug(cfg.label());
  for (uint64_t seed : cfg_.seed_list("evaluate.seeds")) {
    cfg.seed = seed;
    note(cfg.label() + " seed " + std::to_string(seed) + ": attacking " + std::to_string(pool.size()) + " images");
    out.push_back(generate_adversarial_set(s, pool, cfg, cfg_.integer("attack.chunk"),
                                           dir / ("seed-" + std::to_string(seed)), cfg_.flag("evaluate.export_png")));
  }
  describe(dir, "attack", {{"surrogate", v.name()}, {"surrogate_hash", model_hash(s.model())}});
  return out;
}

EvaluationReport Pipeline::evaluate() {
  const TargetRegistry targets = load_targets();
  targets.require_disjoint(few_shot_manifest());
  const SurrogateVariant v = configured_variant();
  const Surrogate s = surrogate(v, false);
  const AttackConfig base = cfg_.attack();
  std::vector<MatrixEntry> entries;
  for (Surface surface : cfg_.evaluate_surfaces()) {
    for (Method method : cfg_.evaluate_methods()) {
      AttackConfig c = base;
      c.surface = surface;
      c.method = method;
      entries.push_back({c.label(), &s, c});
    }
  }
  std::optional<fs::path> archives;
  if (cfg_.flag("evaluate.archive")) archives = run_dir() / "attacks";
  EvaluationReport rep = run_matrix(entries, eval_pool(), targets, matrix_options(archives));
  rep.metadata["surrogate"] = v.name();
  rep.metadata["eval_set"] = cfg_.get("few_shot.eval_set");
  const fs::path dir = run_dir() / "report";
  emit_report(rep, dir, format_set(cfg_.list("evaluate.formats")));
  describe(dir, "evaluate", {{"surrogate_hash", model_hash(s.model())}, {"few_shot_hash", manifest_hash(few_shot_manifest())}});
  return rep;
}

SweepResult Pipeline::sweep_samples() {
  const TargetRegistry targets = load_targets();
  const SurrogateVariant base = configured_variant();
  auto factory = [&](int n) {
    SurrogateVariant v = base;
    v.request = FewShotRequest{0, n};
    return surrogate(v, true);
  };
  SweepResult sw = lbba::sweep_samples(cfg_.int_list("sweep.samples"), factory, eval_pool(), targets, cfg_.attack(),
                                       matrix_options(std::nullopt));
  const fs::path dir = run_dir() / "sweep-samples";
  emit_sweep(sw, dir, format_set(cfg_.list("sweep.formats")));
  describe(dir, "sweep --kind samples");
  return sw;
}

SweepResult Pipeline::sweep_layers() {
  const TargetRegistry targets = load_targets();
  const SurrogateVariant v = configured_variant();
  const Surrogate s = surrogate(v, true);
  SweepResult sw = lbba::sweep_layers(cfg_.sweep_layers(), s, eval_pool(), targets, cfg_.attack(),
                                      matrix_options(std::nullopt));
  const fs::path dir = run_dir() / "sweep-layers";
  emit_sweep(sw, dir, format_set(cfg_.list("sweep.formats")));
  describe(dir, "sweep --kind layers", {{"surrogate_hash", model_hash(s.model())}});
  return sw;
}

EvaluationReport Pipeline::ablate() {
  const TargetRegistry targets = load_targets();
  targets.require_disjoint(few_shot_manifest());
  const FewShotRequest request = cfg_.few_shot_request();
  auto factory = [&](const std::string& objective, bool aug) {
    return surrogate(SurrogateVariant{objective, aug, request}, true);
  };
  EvaluationReport rep =
      run_ablations(factory, eval_pool(), targets, cfg_.attack(), matrix_options(std::nullopt));
  rep.metadata["eval_set"] = cfg_.get("few_shot.eval_set");
  const fs::path dir = run_dir() / "ablations";
  emit_report(rep, dir, format_set(cfg_.list("evaluate.formats")));
  describe(dir, "ablate");
  return rep;
}

void emit_from_run_dir(const fs::path& dir, const std::set<std::string>& formats) {
  auto read_json = [](const fs::path& p) {
    std::ifstream in(p);
    try {
      return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(p.string() + ": " + e.what());
    }
  };
  if (fs::exists(dir / "sweep.json")) {
    emit_sweep(SweepResult::from_json(read_json(dir / "sweep.json")), dir, formats);
    return;
  }
  if (fs::exists(dir / "report.json")) {
    if (formats.count("svg")) throw ConfigError("svg output needs a sweep directory");
    emit_report(EvaluationReport::from_json(read_json(dir / "report.json")), dir, formats);
    return;
  }
  throw DataError("no report.json or sweep.json in " + dir.string());
}

}  // namespace lbba::cli
