#include "lbba/nets.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "lbba/errors.hpp"
#include "lbba/hash.hpp"
#include "lbba/ops.hpp"

namespace lbba {
inline namespace LBBA_PRECISION_NS {

namespace {

const std::vector<std::pair<Family, std::string>>& family_names() {
  static const std::vector<std::pair<Family, std::string>> names = {
      {Family::simplified_resnet18, "simplified-resnet18"},
      {Family::resnet18, "resnet18"},
      {Family::vgg_slim, "vgg-slim"},
      {Family::senet_slim, "senet-slim"},
      {Family::resnet20_target, "resnet20-target"},
      {Family::vgg11_target, "vgg11-target"},
      {Family::mobilenet_lite_target, "mobilenet-lite-target"},
      {Family::mlp, "mlp"},
  };
  return names;
}

const std::vector<std::pair<TruncationPoint, std::string>>& point_names() {
  static const std::vector<std::pair<TruncationPoint, std::string>> names = {
      {TruncationPoint::input, "input"},   {TruncationPoint::stem, "stem"},
      {TruncationPoint::block1, "block1"}, {TruncationPoint::block2, "block2"},
      {TruncationPoint::block3, "block3"}, {TruncationPoint::block4, "block4"},
      {TruncationPoint::pool, "pool"},     {TruncationPoint::fc, "fc"},
  };
  return names;
}

std::string stem_name(StemKind s) {
  switch (s) {
  case StemKind::imagenet7x7:
    return "imagenet7x7";
  case StemKind::cifar3x3:
    return "cifar3x3";
  default:
    return "auto";
  }
}

StemKind stem_from_string(const std::string& s) {
  if (s == "imagenet7x7") return StemKind::imagenet7x7;
  if (s == "cifar3x3") return StemKind::cifar3x3;
  if (s == "auto") return StemKind::automatic;
  throw ConfigError("unknown stem kind '" + s + "'");
}

}  // namespace

std::string to_string(Family f) {
  for (const auto& [k, v] : family_names())
    if (k == f) return v;
  return "unknown";
}

Family family_from_string(const std::string& s) {
  for (const auto& [k, v] : family_names())
    if (v == s) return k;
  throw ConfigError("unknown network family '" + s + "'");
}

std::string to_string(TruncationPoint p) {
  for (const auto& [k, v] : point_names())
    if (k == p) return v;
  return "unknown";
}

TruncationPoint truncation_from_string(const std::string& s) {
  for (const auto& [k, v] : point_names())
    if (v == s) return k;
  throw ConfigError("unknown truncation point '" + s + "'");
}

int ordinal(TruncationPoint p) { return static_cast<int>(p); }

std::vector<int> NetworkSpec::resolved_widths() const {
  if (!widths.empty()) return widths;
  switch (family) {
  case Family::resnet20_target:
    return {16, 32, 64};
  case Family::mobilenet_lite_target:
    return {16, 24, 32, 64};
  case Family::mlp:
    return {};
  default:
    return {64, 128, 256, 512};
  }
}

StemKind NetworkSpec::resolved_stem() const {
  if (stem != StemKind::automatic) return stem;
  return (height >= 128 && width >= 128) ? StemKind::imagenet7x7 : StemKind::cifar3x3;
}

nlohmann::json NetworkSpec::to_json() const {
  return nlohmann::json{{"family", to_string(family)},
                        {"channels", channels},
                        {"height", height},
                        {"width", width},
                        {"num_classes", num_classes},
                        {"stem", stem_name(stem)},
                        {"widths", widths},
                        {"hidden", hidden}};
}

NetworkSpec NetworkSpec::from_json(const nlohmann::json& j) {
  NetworkSpec s;
  try {
    s.family = family_from_string(j.at("family").get<std::string>());
    s.channels = j.at("channels").get<int>();
    s.height = j.at("height").get<int>();
    s.width = j.at("width").get<int>();
    s.num_classes = j.at("num_classes").get<int>();
    s.stem = stem_from_string(j.value("stem", std::string("auto")));
    s.widths = j.value("widths", std::vector<int>{});
    s.hidden = j.value("hidden", std::vector<int>{});
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed network spec: ") + e.what());
  }
  return s;
}

std::string NetworkSpec::hash() const { return sha256_hex(to_json().dump()); }

// ---------------------------------------------------------------------------

Tensor& ParameterStore::add(const std::string& name, Tensor t, bool trainable) {
  if (contains(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  index_[name] = entries_.size();
  entries_.push_back({name, std::move(t), trainable});
  return entries_.back().tensor;
}

const Tensor& ParameterStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("no parameter named '" + name + "'");
  return entries_[it->second].tensor;
}

Tensor& ParameterStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("no parameter named '" + name + "'");
  return entries_[it->second].tensor;
}

std::vector<Tensor> ParameterStore::trainable() const {
  std::vector<Tensor> out;
  for (const auto& e : entries_)
    if (e.trainable) out.push_back(e.tensor);
  return out;
}

int64_t ParameterStore::trainable_count() const {
  int64_t n = 0;
  for (const auto& e : entries_)
    if (e.trainable) n += e.tensor.numel();
  return n;
}

ParameterStore ParameterStore::clone() const {
  ParameterStore out;
  for (const auto& e : entries_) out.add(e.name, e.tensor.clone(), e.trainable);
  out.meta = meta;
  return out;
}

// ---------------------------------------------------------------------------

namespace detail {

struct Ctx {
  const ParameterStore* store;
  const ParamOverrides* overrides;
  bool training;

  Tensor p(const std::string& name) const {
    if (overrides) {
      auto it = overrides->find(name);
      if (it != overrides->end()) return it->second;
    }
    return store->get(name);
  }
};

class Layer {
public:
  virtual ~Layer() = default;
  virtual Tensor forward(const Tensor& x, const Ctx& ctx) const = 0;
};

struct Stage {
  TruncationPoint point;
  std::vector<std::unique_ptr<Layer>> layers;
};

class Architecture {
public:
  std::vector<Stage> stages;
  std::string first_weight;
  int residual_blocks = 0;
};

}  // namespace detail

namespace {

using detail::Ctx;
using detail::Layer;

Tensor bn(const Tensor& x, const std::string& prefix, const Ctx& c) {
  Tensor rm = c.store->get(prefix + ".running_mean");
  Tensor rv = c.store->get(prefix + ".running_var");
  return batch_norm2d(x, c.p(prefix + ".gamma"), c.p(prefix + ".beta"), rm, rv, c.training);
}

class ConvBnAct : public Layer {
public:
  ConvBnAct(std::string prefix, Conv2dOptions opt, bool act)
      : prefix_(std::move(prefix)), opt_(opt), act_(act) {}
  Tensor forward(const Tensor& x, const Ctx& c) const override {
    Tensor y = bn(conv2d(x, c.p(prefix_ + ".conv.weight"), opt_), prefix_ + ".bn", c);
    return act_ ? relu(y) : y;
  }

private:
  std::string prefix_;
  Conv2dOptions opt_;
  bool act_;
};

class MaxPool : public Layer {
public:
  MaxPool(int k, int s, int p) : k_(k), s_(s), p_(p) {}
  Tensor forward(const Tensor& x, const Ctx&) const override { return max_pool2d(x, k_, s_, p_); }

private:
  int k_, s_, p_;
};

class GlobalPool : public Layer {
public:
  Tensor forward(const Tensor& x, const Ctx&) const override { return global_avg_pool(x); }
};

class Dense : public Layer {
public:
  Dense(std::string prefix, bool bias, bool relu_before, bool flatten_input)
      : prefix_(std::move(prefix)), bias_(bias), relu_before_(relu_before), flatten_(flatten_input) {}
  Tensor forward(const Tensor& x, const Ctx& c) const override {
    Tensor h = flatten_ ? flatten(x) : x;
    if (relu_before_) h = relu(h);
    return linear(h, c.p(prefix_ + ".weight"), bias_ ? c.p(prefix_ + ".bias") : Tensor{});
  }

private:
  std::string prefix_;
  bool bias_, relu_before_, flatten_;
};

class BasicBlock : public Layer {
public:
  BasicBlock(std::string prefix, int stride, bool projection, bool squeeze_excite)
      : prefix_(std::move(prefix)), stride_(stride), projection_(projection), se_(squeeze_excite) {}
  Tensor forward(const Tensor& x, const Ctx& c) const override {
    Tensor y = relu(bn(conv2d(x, c.p(prefix_ + ".conv1.weight"), {stride_, 1, 1}), prefix_ + ".bn1", c));
    y = bn(conv2d(y, c.p(prefix_ + ".conv2.weight"), {1, 1, 1}), prefix_ + ".bn2", c);
    if (se_) {
      Tensor s = global_avg_pool(y);
      s = relu(linear(s, c.p(prefix_ + ".se1.weight"), c.p(prefix_ + ".se1.bias")));
      s = sigmoid(linear(s, c.p(prefix_ + ".se2.weight"), c.p(prefix_ + ".se2.bias")));
      y = channel_scale(y, s);
    }
    Tensor shortcut = x;
    if (projection_) {
      shortcut = bn(conv2d(x, c.p(prefix_ + ".down.weight"), {stride_, 0, 1}), prefix_ + ".down_bn", c);
    }
    return relu(add(y, shortcut));
  }

private:
  std::string prefix_;
  int stride_;
  bool projection_, se_;
};

class InvertedResidual : public Layer {
public:
  InvertedResidual(std::string prefix, int hidden, int stride, bool expand, bool residual)
      : prefix_(std::move(prefix)), hidden_(hidden), stride_(stride), expand_(expand), residual_(residual) {}
  Tensor forward(const Tensor& x, const Ctx& c) const override {
    Tensor y = x;
    if (expand_) y = relu(bn(conv2d(y, c.p(prefix_ + ".expand.weight")), prefix_ + ".bn0", c));
    y = relu(bn(conv2d(y, c.p(prefix_ + ".dw.weight"), {stride_, 1, hidden_}), prefix_ + ".bn1", c));
    y = bn(conv2d(y, c.p(prefix_ + ".project.weight")), prefix_ + ".bn2", c);
    return residual_ ? add(y, x) : y;
  }

private:
  std::string prefix_;
  int hidden_, stride_;
  bool expand_, residual_;
};

/// Creates parameters in a fixed order from one RNG stream.
class Builder {
public:
  Builder(ParameterStore& store, uint64_t seed) : store_(store), rng_(seed) {}

  void conv(const std::string& name, int out, int in_per_group, int k) {
    const real stdv = std::sqrt(2.0f / static_cast<real>(in_per_group * k * k));
    store_.add(name, normal({out, in_per_group, k, k}, stdv));
  }
  void batchnorm(const std::string& prefix, int c) {
    store_.add(prefix + ".gamma", Tensor::ones({c}));
    store_.add(prefix + ".beta", Tensor::zeros({c}));
    store_.add(prefix + ".running_mean", Tensor::zeros({c}), false);
    store_.add(prefix + ".running_var", Tensor::ones({c}), false);
  }
  void dense(const std::string& prefix, int out, int in, bool bias) {
    const real bound = 1.0f / std::sqrt(static_cast<real>(in));
    store_.add(prefix + ".weight", uniform({out, in}, bound));
    if (bias) store_.add(prefix + ".bias", uniform({out}, bound));
  }

private:
  Tensor normal(Shape s, real stdv) {
    Tensor t(std::move(s));
    std::normal_distribution<real> d(0.0f, stdv);
    for (auto& v : t.data()) v = d(rng_);
    return t;
  }
  Tensor uniform(Shape s, real bound) {
    Tensor t(std::move(s));
    std::uniform_real_distribution<real> d(-bound, bound);
    for (auto& v : t.data()) v = d(rng_);
    return t;
  }

  ParameterStore& store_;
  std::mt19937_64 rng_;
};

TruncationPoint block_point(int i) {
  return static_cast<TruncationPoint>(ordinal(TruncationPoint::block1) + i);
}

detail::Stage& new_stage(detail::Architecture& a, TruncationPoint p) {
  a.stages.push_back(detail::Stage{p, {}});
  return a.stages.back();
}

void conv_bn(detail::Stage& st, Builder& b, const std::string& prefix, int in, int out, int k,
             int stride, int pad, bool act = true) {
  b.conv(prefix + ".conv.weight", out, in, k);
  b.batchnorm(prefix + ".bn", out);
  st.layers.push_back(std::make_unique<ConvBnAct>(prefix, Conv2dOptions{stride, pad, 1}, act));
}

void basic_block(detail::Stage& st, Builder& b, detail::Architecture& a, const std::string& prefix,
                 int in, int out, int stride, bool se) {
  b.conv(prefix + ".conv1.weight", out, in, 3);
  b.batchnorm(prefix + ".bn1", out);
  b.conv(prefix + ".conv2.weight", out, out, 3);
  b.batchnorm(prefix + ".bn2", out);
  if (se) {
    const int r = std::max(out / 16, 4);
    b.dense(prefix + ".se1", r, out, true);
    b.dense(prefix + ".se2", out, r, true);
  }
  const bool projection = stride != 1 || in != out;
  if (projection) {
    b.conv(prefix + ".down.weight", out, in, 1);
    b.batchnorm(prefix + ".down_bn", out);
  }
  st.layers.push_back(std::make_unique<BasicBlock>(prefix, stride, projection, se));
  ++a.residual_blocks;
}

void inverted_residual(detail::Stage& st, Builder& b, const std::string& prefix, int in, int out,
                       int expansion, int stride) {
  const int hidden = in * expansion;
  const bool expand = expansion != 1;
  if (expand) {
    b.conv(prefix + ".expand.weight", hidden, in, 1);
    b.batchnorm(prefix + ".bn0", hidden);
  }
  b.conv(prefix + ".dw.weight", hidden, 1, 3);
  b.batchnorm(prefix + ".bn1", hidden);
  b.conv(prefix + ".project.weight", out, hidden, 1);
  b.batchnorm(prefix + ".bn2", out);
  st.layers.push_back(
      std::make_unique<InvertedResidual>(prefix, hidden, stride, expand, stride == 1 && in == out));
}

void head(detail::Architecture& a, Builder& b, int features, int classes) {
  new_stage(a, TruncationPoint::pool).layers.push_back(std::make_unique<GlobalPool>());
  b.dense("fc", classes, features, true);
  new_stage(a, TruncationPoint::fc).layers.push_back(std::make_unique<Dense>("fc", true, false, false));
}

void build_resnet(detail::Architecture& a, Builder& b, const NetworkSpec& s, int per_stage, bool se) {
  const auto w = s.resolved_widths();
  if (w.size() != 4) throw ConfigError("residual surrogate families need 4 stage widths");
  auto& stem = new_stage(a, TruncationPoint::stem);
  if (s.resolved_stem() == StemKind::imagenet7x7) {
    conv_bn(stem, b, "stem", s.channels, w[0], 7, 2, 3);
    stem.layers.push_back(std::make_unique<MaxPool>(3, 2, 1));
  } else {
    conv_bn(stem, b, "stem", s.channels, w[0], 3, 1, 1);
  }
  int in = w[0];
  for (int i = 0; i < 4; ++i) {
    auto& st = new_stage(a, block_point(i));
    for (int j = 0; j < per_stage; ++j) {
      const int stride = (i > 0 && j == 0) ? 2 : 1;
      basic_block(st, b, a, "block" + std::to_string(i + 1) + "." + std::to_string(j), in, w[i],
                  stride, se);
      in = w[i];
    }
  }
  head(a, b, in, s.num_classes);
}

void build_vgg_slim(detail::Architecture& a, Builder& b, const NetworkSpec& s) {
  const auto w = s.resolved_widths();
  if (w.size() != 4) throw ConfigError("vgg-slim needs 4 stage widths");
  conv_bn(new_stage(a, TruncationPoint::stem), b, "stem", s.channels, w[0], 3, 1, 1);
  int in = w[0];
  for (int i = 0; i < 4; ++i) {
    auto& st = new_stage(a, block_point(i));
    if (i > 0) st.layers.push_back(std::make_unique<MaxPool>(2, 2, 0));
    conv_bn(st, b, "block" + std::to_string(i + 1) + ".0", in, w[i], 3, 1, 1);
    in = w[i];
  }
  head(a, b, in, s.num_classes);
}

void build_resnet20(detail::Architecture& a, Builder& b, const NetworkSpec& s) {
  const auto w = s.resolved_widths();
  if (w.size() != 3) throw ConfigError("resnet20-target needs 3 stage widths");
  conv_bn(new_stage(a, TruncationPoint::stem), b, "stem", s.channels, w[0], 3, 1, 1);
  int in = w[0];
  for (int i = 0; i < 3; ++i) {
    auto& st = new_stage(a, block_point(i));
    for (int j = 0; j < 3; ++j) {
      basic_block(st, b, a, "block" + std::to_string(i + 1) + "." + std::to_string(j), in, w[i],
                  (i > 0 && j == 0) ? 2 : 1, false);
      in = w[i];
    }
  }
  head(a, b, in, s.num_classes);
}

void build_vgg11(detail::Architecture& a, Builder& b, const NetworkSpec& s) {
  const auto w = s.resolved_widths();
  if (w.size() != 4) throw ConfigError("vgg11-target needs 4 stage widths");
  conv_bn(new_stage(a, TruncationPoint::stem), b, "stem", s.channels, w[0], 3, 1, 1);
  // Convolutions per block after the stem: 1, 2, 2, 2 (VGG-11 layout).
  const int convs[4] = {1, 2, 2, 2};
  const int outs[4] = {w[1], w[2], w[3], w[3]};
  int in = w[0];
  // Pools are dropped once the map is 1x1 so small inputs still build.
  int side = std::min(s.height, s.width);
  auto pool = [&side](detail::Stage& st) {
    if (side < 2) return;
    st.layers.push_back(std::make_unique<MaxPool>(2, 2, 0));
    side /= 2;
  };
  for (int i = 0; i < 4; ++i) {
    auto& st = new_stage(a, block_point(i));
    pool(st);
    for (int j = 0; j < convs[i]; ++j) {
      conv_bn(st, b, "block" + std::to_string(i + 1) + "." + std::to_string(j), in, outs[i], 3, 1, 1);
      in = outs[i];
    }
    if (i == 3) pool(st);
  }
  head(a, b, in, s.num_classes);
}

void build_mobilenet(detail::Architecture& a, Builder& b, const NetworkSpec& s) {
  const auto w = s.resolved_widths();
  if (w.size() != 4) throw ConfigError("mobilenet-lite-target needs 4 stage widths");
  constexpr int kStem = 32;
  constexpr int kHeadWidth = 256;
  conv_bn(new_stage(a, TruncationPoint::stem), b, "stem", s.channels, kStem, 3, 1, 1);
  int in = kStem;
  for (int i = 0; i < 4; ++i) {
    auto& st = new_stage(a, block_point(i));
    const int repeats = i == 0 ? 1 : 2;
    for (int j = 0; j < repeats; ++j) {
      inverted_residual(st, b, "block" + std::to_string(i + 1) + "." + std::to_string(j), in, w[i],
                        i == 0 ? 1 : 6, (i > 0 && j == 0) ? 2 : 1);
      in = w[i];
    }
    if (i == 3) {
      conv_bn(st, b, "block4.head", in, kHeadWidth, 1, 1, 0);
      in = kHeadWidth;
    }
  }
  head(a, b, in, s.num_classes);
}

void build_mlp(detail::Architecture& a, Builder& b, const NetworkSpec& s) {
  auto hidden = s.hidden.empty() ? std::vector<int>{32, 32} : s.hidden;
  if (hidden.size() > 5) throw ConfigError("mlp supports at most 5 hidden layers");
  const int d = s.channels * s.height * s.width;
  b.dense("stem.linear", hidden[0], d, false);
  new_stage(a, TruncationPoint::stem)
      .layers.push_back(std::make_unique<Dense>("stem.linear", false, false, true));
  for (size_t i = 1; i < hidden.size(); ++i) {
    const std::string prefix = "block" + std::to_string(i);
    b.dense(prefix, hidden[i], hidden[i - 1], true);
    new_stage(a, block_point(static_cast<int>(i) - 1))
        .layers.push_back(std::make_unique<Dense>(prefix, true, true, false));
  }
  b.dense("fc", s.num_classes, hidden.back(), true);
  new_stage(a, TruncationPoint::fc).layers.push_back(std::make_unique<Dense>("fc", true, true, false));
}

}  // namespace

Model build(const NetworkSpec& spec, uint64_t seed) {
  if (spec.channels < 1 || spec.height < 1 || spec.width < 1 || spec.num_classes < 1) {
    throw ConfigError("network spec needs positive dims and class count");
  }
  auto arch = std::make_shared<detail::Architecture>();
  ParameterStore store;
  Builder b(store, seed);
  switch (spec.family) {
  case Family::simplified_resnet18:
    build_resnet(*arch, b, spec, 1, false);
    break;
  case Family::resnet18:
    build_resnet(*arch, b, spec, 2, false);
    break;
  case Family::senet_slim:
    build_resnet(*arch, b, spec, 1, true);
    break;
  case Family::vgg_slim:
    build_vgg_slim(*arch, b, spec);
    break;
  case Family::resnet20_target:
    build_resnet20(*arch, b, spec);
    break;
  case Family::vgg11_target:
    build_vgg11(*arch, b, spec);
    break;
  case Family::mobilenet_lite_target:
    build_mobilenet(*arch, b, spec);
    break;
  case Family::mlp:
    build_mlp(*arch, b, spec);
    break;
  default:
    throw ConfigError("unknown network family");
  }
  arch->first_weight = spec.family == Family::mlp ? "stem.linear.weight" : "stem.conv.weight";
  store.meta.spec_hash = spec.hash();
  store.meta.seed = seed;
  return Model(spec, std::move(arch), std::move(store));
}

Model::Model(NetworkSpec spec, std::shared_ptr<const detail::Architecture> arch, ParameterStore params)
    : spec_(std::move(spec)), arch_(std::move(arch)), params_(std::move(params)) {}

std::vector<TruncationPoint> Model::points() const {
  std::vector<TruncationPoint> out{TruncationPoint::input};
  for (const auto& s : arch_->stages) out.push_back(s.point);
  return out;
}

bool Model::has_point(TruncationPoint p) const {
  const auto pts = points();
  return std::find(pts.begin(), pts.end(), p) != pts.end();
}

std::string Model::first_layer_weight() const { return arch_->first_weight; }

int Model::residual_block_count() const { return arch_->residual_blocks; }

void Model::check_input(const Tensor& x) const {
  if (x.rank() != 4 || x.dim(1) != spec_.channels || x.dim(2) != spec_.height ||
      x.dim(3) != spec_.width) {
    throw DimensionError("model expects (N," + std::to_string(spec_.channels) + "," +
                         std::to_string(spec_.height) + "," + std::to_string(spec_.width) +
                         ") input, got " + shape_str(x.shape()));
  }
}

Tensor Model::run(const Tensor& x, TruncationPoint from, TruncationPoint to,
                  const PerturbationMap* deltas, const ParamOverrides* overrides) const {
  for (auto p : {from, to}) {
    if (!has_point(p)) {
      throw ConfigError("truncation point '" + to_string(p) + "' not available in " +
                        to_string(spec_.family));
    }
  }
  if (ordinal(to) < ordinal(from)) throw ConfigError("forward range runs backwards");
  const detail::Ctx ctx{&params_, overrides, training_};
  auto perturb = [&](Tensor cur, TruncationPoint p) {
    if (!deltas) return cur;
    auto it = deltas->find(p);
    return it == deltas->end() ? cur : add(cur, it->second);
  };
  Tensor cur = x;
  if (from == TruncationPoint::input) cur = perturb(cur, TruncationPoint::input);
  if (to == from) return cur;
  for (const auto& stage : arch_->stages) {
    if (ordinal(stage.point) <= ordinal(from)) continue;
    for (const auto& layer : stage.layers) cur = layer->forward(cur, ctx);
    cur = perturb(cur, stage.point);
    if (stage.point == to) break;
  }
  return cur;
}

Tensor Model::forward_logits(const Tensor& x, const ParamOverrides* overrides) const {
  return forward_features(x, TruncationPoint::fc, overrides);
}

Tensor Model::forward_features(const Tensor& x, TruncationPoint l,
                               const ParamOverrides* overrides) const {
  check_input(x);
  return run(x, TruncationPoint::input, l, nullptr, overrides);
}

Tensor Model::forward_features_perturbed(const Tensor& x, const PerturbationMap& deltas,
                                         TruncationPoint l, const ParamOverrides* overrides) const {
  check_input(x);
  PerturbationMap active;
  for (const auto& [p, d] : deltas) {
    if (ordinal(p) <= ordinal(l)) active.emplace(p, d);
  }
  return run(x, TruncationPoint::input, l, &active, overrides);
}

Tensor Model::forward_from(const Tensor& activation, TruncationPoint from, TruncationPoint to,
                           const ParamOverrides* overrides) const {
  if (from == TruncationPoint::input) check_input(activation);
  return run(activation, from, to, nullptr, overrides);
}

Shape Model::activation_shape(TruncationPoint l, int64_t n) const {
  NoGradGuard no_grad;
  Model probe = *this;
  probe.eval();
  Shape s = probe.forward_features(Tensor::zeros({1, spec_.channels, spec_.height, spec_.width}), l).shape();
  s[0] = n;
  return s;
}

Model Model::clone() const {
  Model m(spec_, arch_, params_.clone());
  m.training_ = training_;
  return m;
}

double verify_error_transform_identity(const Model& model, const Tensor& x, const Tensor& a,
                                       TruncationPoint l) {
  const std::string w1_name = model.first_layer_weight();
  if (model.spec().family != Family::mlp) {
    throw UnsupportedArchitectureError(
        "error-transform identity needs a linear bias-free first layer; " +
        to_string(model.spec().family) + " starts with a convolution");
  }
  const Tensor& w1 = model.params().get(w1_name);
  const int64_t d = w1.dim(1);
  if (a.rank() != 2 || a.dim(0) != d || a.dim(1) != d) {
    throw DimensionError("transform matrix must be (" + std::to_string(d) + "," +
                         std::to_string(d) + "), got " + shape_str(a.shape()));
  }
  NoGradGuard no_grad;
  // Parameter side: w1 + w1 A.
  ParamOverrides ov{{w1_name, add(w1, matmul(w1, a))}};
  Tensor lhs = model.forward_features(x, l, &ov);
  // Data side: x + A x, per sample (row form x + x A^T).
  Tensor flat = flatten(x);
  Tensor shifted = reshape(add(flat, matmul(flat, a, /*transpose_b=*/true)), x.shape());
  Tensor rhs = model.forward_features(shifted, l);
  double worst = 0.0;
  for (int64_t i = 0; i < lhs.numel(); ++i) {
    worst = std::max(worst, static_cast<double>(std::abs(lhs.data()[i] - rhs.data()[i])));
  }
  return worst;
}

}  // namespace LBBA_PRECISION_NS
}  // namespace lbba
