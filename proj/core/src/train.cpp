#include "lbba/train.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

#include "lbba/errors.hpp"
#include "lbba/ops.hpp"
#include "lbba/optim.hpp"
#include "lbba/rng.hpp"

namespace lbba {
inline namespace LBBA_PRECISION_NS {

namespace {

struct StepOut {
  Tensor loss;
  int64_t correct = 0;
  int64_t count = 0;
};

using StepFn = std::function<StepOut(std::span<const int64_t> idx, int epoch)>;

struct LoopSpec {
  const char* what;
  int64_t n;
  int batch_size;
  int epochs;
  uint64_t seed;
  double momentum;
  double weight_decay;
  std::function<double(int)> lr_of;
};

// Model parameters carry no gradient outside training.
class GradScope {
 public:
  explicit GradScope(std::vector<Tensor> params) : params_(std::move(params)) {
    for (auto& p : params_) p.set_requires_grad(true);
  }
  ~GradScope() {
    for (auto& p : params_) {
      p.zero_grad();
      p.set_requires_grad(false);
    }
  }
  GradScope(const GradScope&) = delete;
  GradScope& operator=(const GradScope&) = delete;

 private:
  std::vector<Tensor> params_;
};

std::vector<HistoryRow> run_loop(Model& model, const LoopSpec& spec, std::vector<Tensor> params, const StepFn& step,
                                 const EpochCallback& on_epoch) {
  GradScope scope(model.params().trainable());
  model.train();
  SgdMomentum opt(std::move(params), static_cast<real>(spec.momentum), static_cast<real>(spec.weight_decay));
  std::vector<HistoryRow> rows;
  std::vector<int64_t> order(static_cast<size_t>(spec.n));
  for (int epoch = 0; epoch < spec.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng rng = make_rng({spec.seed, 0x0de5, static_cast<uint64_t>(epoch)});
    shuffle(order.begin(), order.end(), rng);
    const double lr = spec.lr_of(epoch);
    double loss_sum = 0.0;
    int64_t correct = 0, seen = 0, step_no = 0;
    for (int64_t at = 0; at < spec.n; at += spec.batch_size, ++step_no) {
      const int64_t len = std::min<int64_t>(spec.batch_size, spec.n - at);
      std::span<const int64_t> idx(order.data() + at, static_cast<size_t>(len));
      StepOut out = step(idx, epoch);
      const double value = out.loss.item();
      if (!std::isfinite(value)) {
        model.eval();
        throw NumericError(std::string(spec.what) + ": non-finite loss at epoch " + std::to_string(epoch) +
                           ", step " + std::to_string(step_no) + " (lr " + std::to_string(lr) + ")");
      }
      backward(out.loss);
      opt.step(static_cast<real>(lr));
      loss_sum += value * static_cast<double>(len);
      correct += out.correct;
      seen += out.count;
    }
    HistoryRow row{epoch, lr, loss_sum / static_cast<double>(spec.n),
                   seen > 0 ? 100.0 * static_cast<double>(correct) / static_cast<double>(seen) : 0.0};
    if (on_epoch) on_epoch(row);
    rows.push_back(row);
  }
  model.eval();
  return rows;
}

int64_t count_argmax_hits(const Tensor& logits, std::span<const int> labels) {
  const int64_t n = logits.dim(0), k = logits.dim(1);
  int64_t hits = 0;
  for (int64_t i = 0; i < n; ++i) {
    const real* row = logits.ptr() + i * k;
    if (std::max_element(row, row + k) - row == labels[static_cast<size_t>(i)]) ++hits;
  }
  return hits;
}

int pooled_width(const Model& model) {
  return static_cast<int>(model.activation_shape(TruncationPoint::pool, 1).at(1));
}

Tensor uniform_param(Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<real>(uniform(rng, -bound, bound));
  return t;
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(lr_end > 0.0 && lr_start >= lr_end)) throw ConfigError("learning rates must satisfy lr_start >= lr_end > 0");
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  if (momentum < 0.0 || weight_decay < 0.0) throw ConfigError("momentum and weight decay must be >= 0");
  augmentation.validate();
}

void TargetTrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("target epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("target batch_size must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("target lr must be positive");
  if (crop_padding < 0) throw ConfigError("crop padding must be >= 0");
}

nlohmann::json HistoryRow::to_json() const { return {{"epoch", epoch}, {"lr", lr}, {"loss", loss}, {"acc", acc}}; }

void write_history_jsonl(const std::filesystem::path& path, const std::vector<HistoryRow>& rows) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write history " + path.string());
  for (const auto& r : rows) out << r.to_json().dump() << "\n";
}

ProjectionHead ProjectionHead::make(int in, int hidden, int out, uint64_t seed) {
  Rng rng = make_rng({seed, 0x4ead});
  ProjectionHead h;
  h.w1 = uniform_param({hidden, in}, 1.0 / std::sqrt(in), rng);
  h.b1 = uniform_param({hidden}, 1.0 / std::sqrt(in), rng);
  h.w2 = uniform_param({out, hidden}, 1.0 / std::sqrt(hidden), rng);
  h.b2 = uniform_param({out}, 1.0 / std::sqrt(hidden), rng);
  for (auto* t : {&h.w1, &h.b1, &h.w2, &h.b2}) t->set_requires_grad();
  return h;
}

Tensor ProjectionHead::forward(const Tensor& x) const { return linear(relu(linear(x, w1, b1)), w2, b2); }

Tensor contrastive_loss(const Tensor& z1, const Tensor& z2, double temperature) {
  if (z1.rank() != 2 || z1.shape() != z2.shape()) throw DimensionError("contrastive_loss expects two (N,D) tensors");
  if (z1.dim(0) < 2) throw ConfigError("contrastive loss needs a batch of at least 2 (no negatives otherwise)");
  const Tensor sim = scale(matmul(l2_normalize(z1), l2_normalize(z2), true), static_cast<real>(1.0 / temperature));
  std::vector<int> target(static_cast<size_t>(z1.dim(0)));
  std::iota(target.begin(), target.end(), 0);
  return softmax_cross_entropy(sim, target);
}

std::vector<HistoryRow> train_supervised(Model& model, const SampleSet& few_shot, const TrainConfig& cfg,
                                         const EpochCallback& on_epoch) {
  cfg.validate();
  if (!few_shot.has_labels()) throw DataError("supervised surrogate training needs labels");
  if (few_shot.size() < 1) throw DataError("empty few-shot set");
  const LoopSpec spec{"train_supervised", few_shot.size(), cfg.batch_size, cfg.epochs, cfg.seed, cfg.momentum,
                      cfg.weight_decay, [&cfg](int e) {
                        return static_cast<double>(linear_lr(e, cfg.epochs, static_cast<real>(cfg.lr_start),
                                                             static_cast<real>(cfg.lr_end)));
                      }};
  return run_loop(
      model, spec, model.params().trainable(),
      [&](std::span<const int64_t> idx, int epoch) {
        Tensor x = augment_batch(few_shot, idx, cfg.augmentation, cfg.seed, static_cast<uint64_t>(epoch));
        const auto labels = few_shot.gather_labels(idx);
        Tensor logits = model.forward_logits(x);
        return StepOut{softmax_cross_entropy(logits, labels), count_argmax_hits(logits, labels),
                       static_cast<int64_t>(idx.size())};
      },
      on_epoch);
}

std::vector<HistoryRow> train_contrastive(Model& model, const SampleSet& few_shot, const TrainConfig& cfg,
                                          const EpochCallback& on_epoch) {
  cfg.validate();
  if (few_shot.size() < 2) throw ConfigError("contrastive training needs at least 2 samples");
  if (cfg.batch_size < 2) throw ConfigError("contrastive training needs batch_size >= 2");
  // A trailing batch of one has no negatives; fold it into the previous one
  // by rounding the batch size so that no remainder of 1 occurs.
  int batch = cfg.batch_size;
  if (few_shot.size() > batch && few_shot.size() % batch == 1) ++batch;
  ProjectionHead head = ProjectionHead::make(pooled_width(model), 256, 128, cfg.seed);
  auto params = model.params().trainable();
  for (const auto& p : head.params()) params.push_back(p);
  const LoopSpec spec{"train_contrastive", few_shot.size(), batch, cfg.epochs, cfg.seed, cfg.momentum,
                      cfg.weight_decay, [&cfg](int e) {
                        return static_cast<double>(linear_lr(e, cfg.epochs, static_cast<real>(cfg.lr_start),
                                                             static_cast<real>(cfg.lr_end)));
                      }};
  return run_loop(
      model, spec, params,
      [&](std::span<const int64_t> idx, int epoch) {
        const auto e = static_cast<uint64_t>(epoch);
        Tensor v1 = augment_batch(few_shot, idx, cfg.augmentation, cfg.seed, e, 1);
        Tensor v2 = augment_batch(few_shot, idx, cfg.augmentation, cfg.seed, e, 2);
        Tensor z1 = head.forward(model.forward_features(v1, TruncationPoint::pool));
        Tensor z2 = head.forward(model.forward_features(v2, TruncationPoint::pool));
        Tensor loss = contrastive_loss(z1, z2, cfg.temperature);
        int64_t hits = 0;
        {
          NoGradGuard ng;
          Tensor sim = matmul(l2_normalize(z1), l2_normalize(z2), true);
          std::vector<int> target(idx.size());
          std::iota(target.begin(), target.end(), 0);
          hits = count_argmax_hits(sim, target);
        }
        return StepOut{loss, hits, static_cast<int64_t>(idx.size())};
      },
      on_epoch);
}

std::vector<HistoryRow> train_rotation(Model& model, const SampleSet& few_shot, const TrainConfig& cfg,
                                       const EpochCallback& on_epoch) {
  cfg.validate();
  if (few_shot.height() != few_shot.width()) throw DimensionError("rotation training needs square images");
  if (few_shot.size() < 1) throw DataError("empty few-shot set");
  Rng init = make_rng({cfg.seed, 0x4071});
  const int width = pooled_width(model);
  // Small head so an untrained model starts near the uniform 4-way loss.
  Tensor w = uniform_param({4, width}, 0.01, init).set_requires_grad();
  Tensor b = Tensor({4}, 0.0f).set_requires_grad();
  auto params = model.params().trainable();
  params.push_back(w);
  params.push_back(b);
  const LoopSpec spec{"train_rotation", few_shot.size(), cfg.batch_size, cfg.epochs, cfg.seed, cfg.momentum,
                      cfg.weight_decay, [&cfg](int e) {
                        return static_cast<double>(linear_lr(e, cfg.epochs, static_cast<real>(cfg.lr_start),
                                                             static_cast<real>(cfg.lr_end)));
                      }};
  return run_loop(
      model, spec, params,
      [&](std::span<const int64_t> idx, int epoch) {
        Tensor x = augment_batch(few_shot, idx, cfg.augmentation, cfg.seed, static_cast<uint64_t>(epoch));
        const int64_t per = x.numel() / x.dim(0);
        std::vector<int> ks(idx.size());
        for (size_t i = 0; i < idx.size(); ++i) {
          Rng r = make_rng({cfg.seed, 0x4072, static_cast<uint64_t>(epoch), static_cast<uint64_t>(idx[i])});
          ks[i] = static_cast<int>(uniform_int(r, 0, 3));
          Tensor one({x.dim(1), x.dim(2), x.dim(3)});
          std::copy_n(x.ptr() + static_cast<int64_t>(i) * per, per, one.ptr());
          Tensor rotated = rotate90(one, ks[i]);
          std::copy_n(rotated.ptr(), per, x.ptr() + static_cast<int64_t>(i) * per);
        }
        Tensor logits = linear(model.forward_features(x, TruncationPoint::pool), w, b);
        return StepOut{softmax_cross_entropy(logits, ks), count_argmax_hits(logits, ks),
                       static_cast<int64_t>(idx.size())};
      },
      on_epoch);
}

std::vector<HistoryRow> train_target(Model& model, const SampleSet& train_split, const TargetTrainConfig& cfg,
                                     const nlohmann::json* few_shot_manifest, const EpochCallback& on_epoch) {
  cfg.validate();
  if (few_shot_manifest) {
    require_disjoint(*few_shot_manifest, train_split.provenance.dataset, train_split.provenance.split);
  }
  if (!train_split.has_labels()) throw DataError("target training needs labels");
  const LoopSpec spec{"train_target", train_split.size(), cfg.batch_size, cfg.epochs, cfg.seed, cfg.momentum,
                      cfg.weight_decay, [&cfg](int e) {
                        return static_cast<double>(cosine_lr(e, cfg.epochs, static_cast<real>(cfg.lr)));
                      }};
  return run_loop(
      model, spec, model.params().trainable(),
      [&](std::span<const int64_t> idx, int epoch) {
        Tensor x = pad_crop_flip_batch(train_split, idx, cfg.crop_padding, cfg.seed, static_cast<uint64_t>(epoch));
        const auto labels = train_split.gather_labels(idx);
        Tensor logits = model.forward_logits(x);
        return StepOut{softmax_cross_entropy(logits, labels), count_argmax_hits(logits, labels),
                       static_cast<int64_t>(idx.size())};
      },
      on_epoch);
}

}  // namespace LBBA_PRECISION_NS
}  // namespace lbba
