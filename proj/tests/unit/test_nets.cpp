#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "lbba/checkpoint.hpp"
#include "lbba/errors.hpp"
#include "lbba/nets.hpp"
#include "lbba/ops.hpp"
#include "test_util.hpp"

using namespace lbba;
using lbba::testing::bit_equal;
using lbba::testing::max_abs_diff;
using lbba::testing::random_tensor;

namespace {

NetworkSpec small_spec(Family f, int hw = 8) {
  NetworkSpec s;
  s.family = f;
  s.height = s.width = hw;
  if (f == Family::resnet20_target) {
    s.widths = {4, 8, 8};
  } else if (f == Family::mobilenet_lite_target) {
    s.widths = {4, 8, 8, 8};
  } else if (f != Family::mlp) {
    s.widths = {4, 8, 8, 8};
  }
  return s;
}

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "lbba_test_nets";
  std::filesystem::create_directories(dir);
  return dir / name;
}

const std::vector<Family> kAllFamilies = {
    Family::simplified_resnet18, Family::resnet18,     Family::vgg_slim,
    Family::senet_slim,          Family::resnet20_target, Family::vgg11_target,
    Family::mobilenet_lite_target, Family::mlp};

}  // namespace

TEST(Build, SimplifiedResnet18HasFourResidualBlocks) {
  Model m = build(NetworkSpec{}, 0);
  EXPECT_EQ(m.residual_block_count(), 4);
  EXPECT_EQ(build(small_spec(Family::resnet18), 0).residual_block_count(), 8);
}

TEST(Build, SameSeedGivesIdenticalParameters) {
  Model a = build(NetworkSpec{}, 42);
  Model b = build(NetworkSpec{}, 42);
  Model c = build(NetworkSpec{}, 43);
  ASSERT_EQ(a.params().entries().size(), b.params().entries().size());
  bool any_differs = false;
  for (size_t i = 0; i < a.params().entries().size(); ++i) {
    EXPECT_TRUE(bit_equal(a.params().entries()[i].tensor, b.params().entries()[i].tensor));
    any_differs |= !bit_equal(a.params().entries()[i].tensor, c.params().entries()[i].tensor);
  }
  EXPECT_TRUE(any_differs);
}

TEST(Build, SimplifiedIsSmallerThanStandardResnet18) {
  NetworkSpec simplified;
  NetworkSpec standard;
  standard.family = Family::resnet18;
  const int64_t a = build(simplified, 0).params().trainable_count();
  const int64_t b = build(standard, 0).params().trainable_count();
  EXPECT_LT(a, b);
  // Standard CIFAR ResNet-18 (3x3 stem, 1x1 projections, biased fc): 11,173,962.
  EXPECT_EQ(b, 11173962);
}

TEST(Build, InitializationFollowsHeFanIn) {
  Model m = build(NetworkSpec{}, 5);
  const Tensor& w = m.params().get("block2.0.conv1.weight");
  double ss = 0;
  for (real v : w.data()) ss += static_cast<double>(v) * v;
  const double fan_in = w.dim(1) * w.dim(2) * w.dim(3);
  EXPECT_NEAR(ss / w.numel(), 2.0 / fan_in, 0.1 * 2.0 / fan_in);
  for (real v : m.params().get("stem.bn.gamma").data()) EXPECT_EQ(v, 1.0f);
  for (real v : m.params().get("stem.bn.beta").data()) EXPECT_EQ(v, 0.0f);
}

TEST(Build, UnknownFamilyNameIsConfigError) {
  EXPECT_THROW(family_from_string("resnet-1000"), ConfigError);
  EXPECT_EQ(family_from_string("vgg-slim"), Family::vgg_slim);
}

TEST(Build, ParameterNamesAreUnique) {
  for (Family f : kAllFamilies) {
    Model m = build(small_spec(f), 1);
    std::set<std::string> names;
    for (const auto& e : m.params().entries()) EXPECT_TRUE(names.insert(e.name).second) << e.name;
  }
}

TEST(Forward, EveryFamilyProducesClassLogits) {
  for (Family f : kAllFamilies) {
    Model m = build(small_spec(f), 2);
    Tensor y = m.forward_logits(Tensor::zeros({2, 3, 8, 8}));
    EXPECT_EQ(y.shape(), (Shape{2, 10})) << to_string(f);
    EXPECT_TRUE(y.all_finite()) << to_string(f);
  }
}

TEST(Forward, ImagenetStemAtLargeInputs) {
  NetworkSpec s = small_spec(Family::simplified_resnet18, 128);
  EXPECT_EQ(s.resolved_stem(), StemKind::imagenet7x7);
  Model m = build(s, 0);
  EXPECT_EQ(m.activation_shape(TruncationPoint::block1, 1), (Shape{1, 4, 32, 32}));
}

TEST(Forward, EvalModeIsDeterministicAndPure) {
  Model m = build(small_spec(Family::simplified_resnet18), 3);
  std::mt19937_64 rng(1);
  Tensor x = random_tensor({3, 3, 8, 8}, rng, 0, 1);
  auto before = m.params().clone();
  Tensor a = m.forward_logits(x);
  Tensor b = m.forward_logits(x);
  EXPECT_TRUE(bit_equal(a, b));
  for (size_t i = 0; i < before.entries().size(); ++i) {
    EXPECT_TRUE(bit_equal(before.entries()[i].tensor, m.params().entries()[i].tensor));
  }
}

TEST(Forward, TrainModeUpdatesRunningStatistics) {
  Model m = build(small_spec(Family::simplified_resnet18), 3);
  std::mt19937_64 rng(1);
  Tensor x = random_tensor({3, 3, 8, 8}, rng, 0, 1);
  m.train();
  m.forward_logits(x);
  bool moved = false;
  for (real v : m.params().get("stem.bn.running_mean").data()) moved |= v != 0.0f;
  EXPECT_TRUE(moved);
}

TEST(Forward, BatchPermutationPermutesRows) {
  Model m = build(small_spec(Family::senet_slim), 4);
  std::mt19937_64 rng(2);
  Tensor x = random_tensor({3, 3, 8, 8}, rng, 0, 1);
  Tensor xp(x.shape());
  const std::vector<int> perm{2, 0, 1};
  const int64_t per = 3 * 8 * 8;
  for (int i = 0; i < 3; ++i)
    std::copy_n(x.ptr() + perm[i] * per, per, xp.ptr() + i * per);
  Tensor y = m.forward_logits(x);
  Tensor yp = m.forward_logits(xp);
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 10; ++k) EXPECT_NEAR(yp.data()[i * 10 + k], y.data()[perm[i] * 10 + k], 1e-5);
}

TEST(Forward, WrongInputDimsIsDimensionError) {
  Model m = build(small_spec(Family::vgg_slim), 0);
  EXPECT_THROW(m.forward_logits(Tensor::zeros({1, 3, 9, 8})), DimensionError);
  EXPECT_THROW(m.forward_logits(Tensor::zeros({1, 1, 8, 8})), DimensionError);
}

TEST(Features, Block1ShapeOn32x32) {
  Model m = build(NetworkSpec{}, 0);
  Tensor f = m.forward_features(Tensor::zeros({2, 3, 32, 32}), TruncationPoint::block1);
  EXPECT_EQ(f.shape(), (Shape{2, 64, 32, 32}));
}

TEST(Features, FcEqualsLogits) {
  for (Family f : kAllFamilies) {
    Model m = build(small_spec(f), 6);
    std::mt19937_64 rng(3);
    Tensor x = random_tensor({2, 3, 8, 8}, rng, 0, 1);
    EXPECT_TRUE(bit_equal(m.forward_features(x, TruncationPoint::fc), m.forward_logits(x)));
  }
}

TEST(Features, CompositionThroughRemainingLayers) {
  for (Family f : kAllFamilies) {
    Model m = build(small_spec(f), 7);
    std::mt19937_64 rng(4);
    Tensor x = random_tensor({2, 3, 8, 8}, rng, 0, 1);
    Tensor logits = m.forward_logits(x);
    for (TruncationPoint p : m.points()) {
      Tensor mid = m.forward_features(x, p);
      EXPECT_LT(max_abs_diff(m.forward_from(mid, p, TruncationPoint::fc), logits), 1e-6)
          << to_string(f) << " at " << to_string(p);
    }
  }
}

TEST(Features, InvalidPointIsConfigError) {
  Model m = build(small_spec(Family::resnet20_target), 0);
  EXPECT_FALSE(m.has_point(TruncationPoint::block4));
  EXPECT_THROW(m.forward_features(Tensor::zeros({1, 3, 8, 8}), TruncationPoint::block4), ConfigError);
  EXPECT_THROW(truncation_from_string("block9"), ConfigError);
}

TEST(Features, GradientReachesInput) {
  Model m = build(small_spec(Family::simplified_resnet18), 8);
  Tensor x = Tensor::ones({1, 3, 8, 8}).set_requires_grad();
  backward(sum(m.forward_features(x, TruncationPoint::block1)));
  ASSERT_TRUE(x.has_grad());
  bool nonzero = false;
  for (real g : x.grad()) nonzero |= g != 0.0f;
  EXPECT_TRUE(nonzero);
}

TEST(Perturbed, EmptyMapIsBitIdentical) {
  Model m = build(small_spec(Family::simplified_resnet18), 9);
  std::mt19937_64 rng(5);
  Tensor x = random_tensor({2, 3, 8, 8}, rng, 0, 1);
  EXPECT_TRUE(bit_equal(m.forward_features_perturbed(x, {}, TruncationPoint::block2),
                        m.forward_features(x, TruncationPoint::block2)));
}

TEST(Perturbed, ZeroDeltasMatchUnperturbed) {
  Model m = build(small_spec(Family::simplified_resnet18), 9);
  std::mt19937_64 rng(5);
  Tensor x = random_tensor({2, 3, 8, 8}, rng, 0, 1);
  PerturbationMap d;
  for (auto p : {TruncationPoint::input, TruncationPoint::stem, TruncationPoint::block1})
    d[p] = Tensor::zeros(m.activation_shape(p, 2));
  EXPECT_LT(max_abs_diff(m.forward_features_perturbed(x, d, TruncationPoint::block1),
                         m.forward_features(x, TruncationPoint::block1)),
            1e-7);
}

TEST(Perturbed, InputDeltaEqualsShiftedInput) {
  Model m = build(small_spec(Family::vgg_slim), 10);
  std::mt19937_64 rng(6);
  Tensor x = random_tensor({2, 3, 8, 8}, rng, 0, 1);
  Tensor d0 = random_tensor({2, 3, 8, 8}, rng, -0.1f, 0.1f);
  EXPECT_LT(max_abs_diff(m.forward_features_perturbed(x, {{TruncationPoint::input, d0}}, TruncationPoint::block1),
                         m.forward_features(add(x, d0), TruncationPoint::block1)),
            1e-6);
}

TEST(Perturbed, HiddenDeltaEqualsManualTwoStageForward) {
  Model m = build(small_spec(Family::simplified_resnet18), 11);
  std::mt19937_64 rng(7);
  Tensor x = random_tensor({2, 3, 8, 8}, rng, 0, 1);
  Tensor d = random_tensor(m.activation_shape(TruncationPoint::stem, 2), rng, -0.2f, 0.2f);
  Tensor manual = m.forward_from(add(m.forward_features(x, TruncationPoint::stem), d), TruncationPoint::stem,
                                 TruncationPoint::block2);
  Tensor perturbed = m.forward_features_perturbed(x, {{TruncationPoint::stem, d}}, TruncationPoint::block2);
  EXPECT_LT(max_abs_diff(manual, perturbed), 1e-6);
}

TEST(Perturbed, DeltasAreDifferentiable) {
  Model m = build(small_spec(Family::simplified_resnet18), 12);
  Tensor x = Tensor::ones({1, 3, 8, 8});
  Tensor d = Tensor::zeros(m.activation_shape(TruncationPoint::stem, 1)).set_requires_grad();
  backward(sum(m.forward_features_perturbed(x, {{TruncationPoint::stem, d}}, TruncationPoint::block1)));
  EXPECT_TRUE(d.has_grad());
}

TEST(Perturbed, ShapeMismatchIsDimensionError) {
  Model m = build(small_spec(Family::simplified_resnet18), 12);
  Tensor x = Tensor::ones({1, 3, 8, 8});
  EXPECT_THROW(m.forward_features_perturbed(x, {{TruncationPoint::stem, Tensor::zeros({1, 2, 8, 8})}},
                                            TruncationPoint::block1),
               DimensionError);
}

namespace {

NetworkSpec mlp_spec(int c, int hw, std::vector<int> hidden) {
  NetworkSpec s;
  s.family = Family::mlp;
  s.channels = c;
  s.height = s.width = hw;
  s.hidden = std::move(hidden);
  return s;
}

}  // namespace

TEST(ErrorTransform, ZeroMatrixGivesZero) {
  Model m = build(mlp_spec(1, 4, {8, 8}), 0);
  std::mt19937_64 rng(1);
  Tensor x = random_tensor({3, 1, 4, 4}, rng, 0, 1);
  EXPECT_EQ(verify_error_transform_identity(m, x, Tensor::zeros({16, 16})), 0.0);
}

TEST(ErrorTransform, ScaledIdentity) {
  Model m = build(mlp_spec(1, 4, {8, 8}), 0);
  std::mt19937_64 rng(2);
  Tensor x = random_tensor({3, 1, 4, 4}, rng, 0, 1);
  Tensor a = Tensor::zeros({16, 16});
  for (int i = 0; i < 16; ++i) a.data()[i * 16 + i] = 0.3f;
  EXPECT_LT(verify_error_transform_identity(m, x, a), 1e-5);
}

TEST(ErrorTransform, RandomTriples) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> hd(4, 24), cd(1, 3), sd(2, 5);
  for (int trial = 0; trial < 50; ++trial) {
    const int c = cd(rng), hw = sd(rng);
    Model m = build(mlp_spec(c, hw, {hd(rng), hd(rng)}), static_cast<uint64_t>(trial));
    const int d = c * hw * hw;
    Tensor x = random_tensor({2, c, hw, hw}, rng, 0, 1);
    Tensor a = random_tensor({d, d}, rng, -1.0f / d, 1.0f / d);
    for (TruncationPoint p : {TruncationPoint::stem, TruncationPoint::block1, TruncationPoint::fc}) {
      EXPECT_LT(verify_error_transform_identity(m, x, a, p), 1e-5) << "trial " << trial;
    }
  }
}

TEST(ErrorTransform, ConvolutionalFirstLayerIsUnsupported) {
  Model m = build(small_spec(Family::simplified_resnet18), 0);
  EXPECT_THROW(verify_error_transform_identity(m, Tensor::zeros({1, 3, 8, 8}), Tensor::zeros({192, 192})),
               UnsupportedArchitectureError);
}

TEST(ErrorTransform, WrongMatrixShapeIsDimensionError) {
  Model m = build(mlp_spec(1, 4, {8}), 0);
  EXPECT_THROW(verify_error_transform_identity(m, Tensor::zeros({1, 1, 4, 4}), Tensor::zeros({15, 16})),
               DimensionError);
}

TEST(Checkpoint, RoundTripPreservesBytesAndLogits) {
  Model m = build(small_spec(Family::senet_slim), 21);
  m.train();
  std::mt19937_64 rng(8);
  m.forward_logits(random_tensor({4, 3, 8, 8}, rng, 0, 1));
  m.eval();
  const auto path = temp_path("roundtrip.lbba");
  save_checkpoint(m, path);
  Model loaded = load_checkpoint(path);
  EXPECT_EQ(loaded.spec(), m.spec());
  ASSERT_EQ(loaded.params().entries().size(), m.params().entries().size());
  for (size_t i = 0; i < m.params().entries().size(); ++i) {
    EXPECT_TRUE(bit_equal(loaded.params().entries()[i].tensor, m.params().entries()[i].tensor));
    EXPECT_EQ(loaded.params().entries()[i].trainable, m.params().entries()[i].trainable);
  }
  Tensor probe = random_tensor({2, 3, 8, 8}, rng, 0, 1);
  EXPECT_TRUE(bit_equal(loaded.forward_logits(probe), m.forward_logits(probe)));
}

TEST(Checkpoint, PayloadIsAligned) {
  Model m = build(mlp_spec(1, 4, {5, 7}), 0);
  const auto path = temp_path("aligned.lbba");
  save_checkpoint(m, path);
  TensorFile f = read_tensor_file(path);
  std::ifstream in(path, std::ios::binary);
  char magic[4];
  in.read(magic, 4);
  EXPECT_EQ(std::string(magic, 4), "LBBA");
  EXPECT_EQ(f.tensors.size(), m.params().entries().size());
}

TEST(Checkpoint, TruncatedFileIsCorruptManifest) {
  Model m = build(small_spec(Family::vgg_slim), 0);
  const auto path = temp_path("truncated.lbba");
  save_checkpoint(m, path);
  std::filesystem::resize_file(path, 40);
  try {
    load_checkpoint(path);
    FAIL() << "expected a checkpoint error";
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.code(), CheckpointErrorCode::corrupt_manifest);
  }
}

TEST(Checkpoint, TruncatedPayloadIsCorruptManifest) {
  Model m = build(small_spec(Family::vgg_slim), 0);
  const auto path = temp_path("short_payload.lbba");
  save_checkpoint(m, path);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 8);
  try {
    load_checkpoint(path);
    FAIL() << "expected a checkpoint error";
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.code(), CheckpointErrorCode::corrupt_manifest);
  }
}

TEST(Checkpoint, UnknownVersion) {
  Model m = build(mlp_spec(1, 2, {3}), 0);
  const auto path = temp_path("version.lbba");
  save_checkpoint(m, path);
  {
    std::fstream io(path, std::ios::binary | std::ios::in | std::ios::out);
    io.seekp(4);
    const uint32_t v = 99;
    io.write(reinterpret_cast<const char*>(&v), 4);
  }
  try {
    load_checkpoint(path);
    FAIL() << "expected a checkpoint error";
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.code(), CheckpointErrorCode::unknown_version);
  }
}

TEST(Checkpoint, DifferentSpecIsSpecMismatch) {
  Model m = build(small_spec(Family::vgg_slim), 0);
  const auto path = temp_path("spec.lbba");
  save_checkpoint(m, path);
  NetworkSpec other = small_spec(Family::simplified_resnet18);
  try {
    load_checkpoint(path, &other);
    FAIL() << "expected a checkpoint error";
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.code(), CheckpointErrorCode::spec_mismatch);
  }
  NetworkSpec same = small_spec(Family::vgg_slim);
  EXPECT_NO_THROW(load_checkpoint(path, &same));
}

TEST(Checkpoint, ShapeMismatch) {
  TensorFile f;
  Model m = build(mlp_spec(1, 2, {3}), 0);
  f.header = {{"kind", "checkpoint"}, {"spec", m.spec().to_json()}, {"spec_hash", m.spec().hash()}, {"seed", 0}};
  for (const auto& e : m.params().entries()) f.tensors.push_back({e.name, e.tensor});
  f.tensors[0].tensor = Tensor::zeros({1, 1});
  const auto path = temp_path("shape.lbba");
  write_tensor_file(path, f);
  try {
    load_checkpoint(path);
    FAIL() << "expected a checkpoint error";
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.code(), CheckpointErrorCode::shape_mismatch);
  }
}

TEST(Checkpoint, MissingFileIsIoError) {
  try {
    load_checkpoint(temp_path("does_not_exist.lbba"));
    FAIL() << "expected a checkpoint error";
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.code(), CheckpointErrorCode::io);
  }
}
