#include "run_config.hpp"

#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "lbba/errors.hpp"

namespace lbba::cli {

namespace {

struct KeyDefault {
  const char* key;
  const char* value;
};

// Canonical key order; also the resolved-config order.
const std::vector<KeyDefault>& defaults() {
  static const std::vector<KeyDefault> table = {
      {"data.source", "cifar10"},
      {"data.root", ""},
      {"data.synthetic_classes", "10"},
      {"data.synthetic_train_per_class", "500"},
      {"data.synthetic_test_per_class", "100"},
      {"data.synthetic_size", "32"},
      {"data.synthetic_seed", "1"},

      {"output.dir", "runs/default"},

      {"few_shot.split", "test"},
      {"few_shot.n_per_class", "100"},
      {"few_shot.n_total", "0"},
      {"few_shot.seed", "0"},
      {"few_shot.eval_set", "same"},
      {"few_shot.eval_n_per_class", "100"},

      {"surrogate.family", "simplified-resnet18"},
      {"surrogate.widths", ""},
      {"surrogate.objective", "supervised"},
      {"surrogate.augmentation", "true"},
      {"surrogate.batch_size", "128"},
      {"surrogate.epochs", "500"},
      {"surrogate.lr_start", "0.4"},
      {"surrogate.lr_end", "0.008"},
      {"surrogate.momentum", "0.9"},
      {"surrogate.weight_decay", "0.0005"},
      {"surrogate.temperature", "0.5"},
      {"surrogate.seed", "0"},

      {"targets.families", "resnet20-target,vgg11-target,mobilenet-lite-target"},
      {"targets.width_divisor", "1"},
      {"targets.batch_size", "128"},
      {"targets.epochs", "60"},
      {"targets.lr", "0.1"},
      {"targets.momentum", "0.9"},
      {"targets.weight_decay", "0.0005"},
      {"targets.crop_padding", "4"},
      {"targets.seed", "0"},
      {"targets.min_clean_acc", "80"},

      {"attack.norm", "linf"},
      {"attack.eps", "0.1"},
      {"attack.steps", "50"},
      {"attack.step_size", "auto"},
      {"attack.method", "pgd"},
      {"attack.mi_decay", "1"},
      {"attack.di_prob", "0.5"},
      {"attack.di_min_scale", "0.9"},
      {"attack.ti_size", "7"},
      {"attack.ti_sigma", "3"},
      {"attack.surface", "etf"},
      {"attack.layer", "block1"},
      {"attack.metric", "auto"},
      {"attack.metric_temperature", "0.5"},
      {"attack.tau", "auto"},
      {"attack.tau_norm", "auto"},
      {"attack.tau_hidden", "auto"},
      {"attack.inner_steps", "5"},
      {"attack.inner_step_size", "auto"},
      {"attack.guide", "random-diff-label"},
      {"attack.chunk", "64"},

      {"evaluate.surfaces", "deep,shallow,etf"},
      {"evaluate.methods", "pgd"},
      {"evaluate.seeds", "0,1,2,3,4"},
      {"evaluate.sanity_floor", "0"},
      {"evaluate.archive", "true"},
      {"evaluate.export_png", "false"},
      {"evaluate.formats", "csv,md,json"},

      {"sweep.samples", "2,10,100,1000"},
      {"sweep.layers", "stem,block1,block2,block3,block4,fc"},
      {"sweep.formats", "csv,md,json,svg"},
  };
  return table;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad(const std::string& key, const std::string& value, const std::string& want) {
  throw ConfigError(key + ": expected " + want + ", got '" + value + "'");
}

template <class T>
T parse_integral(const std::string& key, const std::string& v) {
  T out{};
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty()) bad(key, v, "an integer");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  if (v.empty()) bad(key, v, "a number");
  char* end = nullptr;
  const double out = std::strtod(v.c_str(), &end);
  if (end != v.c_str() + v.size() || !std::isfinite(out)) bad(key, v, "a number");
  return out;
}

}  // namespace

RunConfig::RunConfig() {
  for (const auto& d : defaults()) values_[d.key] = d.value;
}

RunConfig RunConfig::parse(const std::string& text, const std::string& origin) {
  boost::property_tree::ptree tree;
  std::istringstream in(text);
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(origin + ": " + e.message() + " (line " + std::to_string(e.line()) + ")");
  }
  RunConfig cfg;
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) {
      throw ConfigError(origin + ": key '" + section + "' is outside any section");
    }
    if (cfg.values_.lower_bound(section + ".") == cfg.values_.lower_bound(section + "/")) {
      throw ConfigError(origin + ": unknown section [" + section + "]");
    }
    for (const auto& [name, value] : body) {
      const std::string key = section + "." + name;
      if (!cfg.values_.count(key)) throw ConfigError(origin + ": unknown key '" + key + "'");
      cfg.values_[key] = trim(value.get_value<std::string>());
    }
  }
  cfg.validate();
  return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

void RunConfig::set(const std::string& key, const std::string& value) {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown key '" + key + "'");
  it->second = trim(value);
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown key '" + key + "'");
  return it->second;
}

std::string RunConfig::to_ini() const {
  std::string out, section;
  for (const auto& d : defaults()) {
    const std::string key = d.key;
    const auto dot = key.find('.');
    if (key.substr(0, dot) != section) {
      if (!section.empty()) out += "\n";
      section = key.substr(0, dot);
      out += "[" + section + "]\n";
    }
    out += key.substr(dot + 1) + " = " + values_.at(key) + "\n";
  }
  return out;
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& d : defaults()) {
    const std::string key = d.key;
    const auto dot = key.find('.');
    j[key.substr(0, dot)][key.substr(dot + 1)] = values_.at(key);
  }
  return j;
}

int RunConfig::integer(const std::string& key) const { return parse_integral<int>(key, get(key)); }

uint64_t RunConfig::unsigned_integer(const std::string& key) const {
  return parse_integral<uint64_t>(key, get(key));
}

double RunConfig::number(const std::string& key) const { return parse_double(key, get(key)); }

std::optional<double> RunConfig::maybe_number(const std::string& key) const {
  if (get(key) == "auto") return std::nullopt;
  return number(key);
}

bool RunConfig::flag(const std::string& key) const {
  const auto& v = get(key);
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad(key, v, "a boolean");
}

std::vector<std::string> RunConfig::list(const std::string& key) const {
  std::vector<std::string> out;
  std::stringstream ss(get(key));
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<int> RunConfig::int_list(const std::string& key) const {
  std::vector<int> out;
  for (const auto& s : list(key)) out.push_back(parse_integral<int>(key, s));
  return out;
}

std::vector<uint64_t> RunConfig::seed_list(const std::string& key) const {
  std::vector<uint64_t> out;
  for (const auto& s : list(key)) out.push_back(parse_integral<uint64_t>(key, s));
  return out;
}

std::filesystem::path RunConfig::run_dir() const {
  if (get("output.dir").empty()) throw ConfigError("output.dir must not be empty");
  return get("output.dir");
}

std::filesystem::path RunConfig::data_root() const {
  if (!get("data.root").empty()) return get("data.root");
  if (const char* env = std::getenv("LBBA_DATA_DIR"); env && *env) return env;
  return {};
}

FewShotRequest RunConfig::few_shot_request() const {
  FewShotRequest r;
  r.n_per_class = integer("few_shot.n_per_class");
  r.n_total = integer("few_shot.n_total");
  if (r.n_total > 0) r.n_per_class = 0;
  if ((r.n_per_class > 0) == (r.n_total > 0)) {
    throw ConfigError("few_shot: exactly one of n_per_class and n_total must be positive");
  }
  return r;
}

TrainConfig RunConfig::surrogate_train() const {
  TrainConfig t;
  t.batch_size = integer("surrogate.batch_size");
  t.epochs = integer("surrogate.epochs");
  t.lr_start = number("surrogate.lr_start");
  t.lr_end = number("surrogate.lr_end");
  t.momentum = number("surrogate.momentum");
  t.weight_decay = number("surrogate.weight_decay");
  t.temperature = number("surrogate.temperature");
  t.seed = unsigned_integer("surrogate.seed");
  t.augmentation.enabled = flag("surrogate.augmentation");
  if (t.batch_size < 1) throw ConfigError("surrogate.batch_size must be >= 1");
  t.validate();
  return t;
}

TargetTrainConfig RunConfig::target_train() const {
  TargetTrainConfig t;
  t.batch_size = integer("targets.batch_size");
  t.epochs = integer("targets.epochs");
  t.lr = number("targets.lr");
  t.momentum = number("targets.momentum");
  t.weight_decay = number("targets.weight_decay");
  t.crop_padding = integer("targets.crop_padding");
  t.seed = unsigned_integer("targets.seed");
  t.validate();
  return t;
}

AttackConfig RunConfig::attack() const {
  AttackConfig a;
  a.norm = norm_from_string(get("attack.norm"));
  a.eps = number("attack.eps");
  a.steps = integer("attack.steps");
  a.step_size = maybe_number("attack.step_size");
  a.method = method_from_string(get("attack.method"));
  a.mi_decay = number("attack.mi_decay");
  a.di_prob = number("attack.di_prob");
  a.di_min_scale = number("attack.di_min_scale");
  a.ti_size = integer("attack.ti_size");
  a.ti_sigma = number("attack.ti_sigma");
  a.surface = surface_from_string(get("attack.surface"));
  a.layer = truncation_from_string(get("attack.layer"));
  if (get("attack.metric") != "auto") a.metric = metric_from_string(get("attack.metric"));
  a.metric_temperature = number("attack.metric_temperature");
  a.tau = maybe_number("attack.tau");
  if (get("attack.tau_norm") != "auto") a.tau_norm = norm_from_string(get("attack.tau_norm"));
  a.tau_hidden = maybe_number("attack.tau_hidden");
  a.inner_steps = integer("attack.inner_steps");
  a.inner_step_size = maybe_number("attack.inner_step_size");
  a.guide = guide_from_string(get("attack.guide"));
  a.validate();
  return a;
}

NetworkSpec RunConfig::surrogate_spec(int channels, int height, int width, int classes) const {
  NetworkSpec s;
  s.family = family_from_string(get("surrogate.family"));
  s.channels = channels;
  s.height = height;
  s.width = width;
  s.num_classes = classes;
  s.widths = int_list("surrogate.widths");
  return s;
}

std::vector<Family> RunConfig::target_families() const {
  std::vector<Family> out;
  for (const auto& s : list("targets.families")) out.push_back(family_from_string(s));
  if (out.empty()) throw ConfigError("targets.families must name at least one family");
  return out;
}

std::vector<Surface> RunConfig::evaluate_surfaces() const {
  std::vector<Surface> out;
  for (const auto& s : list("evaluate.surfaces")) out.push_back(surface_from_string(s));
  if (out.empty()) throw ConfigError("evaluate.surfaces must not be empty");
  return out;
}

std::vector<Method> RunConfig::evaluate_methods() const {
  std::vector<Method> out;
  for (const auto& s : list("evaluate.methods")) out.push_back(method_from_string(s));
  if (out.empty()) throw ConfigError("evaluate.methods must not be empty");
  return out;
}

std::vector<TruncationPoint> RunConfig::sweep_layers() const {
  std::vector<TruncationPoint> out;
  for (const auto& s : list("sweep.layers")) out.push_back(truncation_from_string(s));
  return out;
}

void RunConfig::validate() const {
  const auto& source = get("data.source");
  if (source != "cifar10" && source != "synthetic") bad("data.source", source, "cifar10 or synthetic");
  for (const char* k : {"data.synthetic_classes", "data.synthetic_train_per_class", "data.synthetic_test_per_class",
                        "data.synthetic_size", "few_shot.eval_n_per_class", "attack.chunk"}) {
    if (integer(k) < 1) bad(k, get(k), "a positive integer");
  }
  unsigned_integer("data.synthetic_seed");
  run_dir();
  const auto& split = get("few_shot.split");
  if (split != "train" && split != "test") bad("few_shot.split", split, "train or test");
  const auto& eval_set = get("few_shot.eval_set");
  if (eval_set != "same" && eval_set != "disjoint") bad("few_shot.eval_set", eval_set, "same or disjoint");
  few_shot_request();
  unsigned_integer("few_shot.seed");
  const auto& objective = get("surrogate.objective");
  if (objective != "supervised" && objective != "contrastive" && objective != "rotation") {
    bad("surrogate.objective", objective, "supervised, contrastive or rotation");
  }
  surrogate_train();
  surrogate_spec(3, 32, 32, 10);
  target_train();
  target_families();
  if (integer("targets.width_divisor") < 1) bad("targets.width_divisor", get("targets.width_divisor"), "an integer >= 1");
  number("targets.min_clean_acc");
  attack();
  evaluate_surfaces();
  evaluate_methods();
  if (seed_list("evaluate.seeds").empty()) throw ConfigError("evaluate.seeds must not be empty");
  number("evaluate.sanity_floor");
  flag("evaluate.archive");
  flag("evaluate.export_png");
  for (const char* k : {"evaluate.formats", "sweep.formats"}) {
    for (const auto& f : list(k))
      if (f != "csv" && f != "md" && f != "json" && f != "svg") bad(k, f, "csv, md, json or svg");
  }
  for (int n : int_list("sweep.samples"))
    if (n < 1) bad("sweep.samples", std::to_string(n), "positive sample counts");
  sweep_layers();
}

}  // namespace lbba::cli
