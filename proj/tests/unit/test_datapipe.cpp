#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "lbba/augment.hpp"
#include "lbba/data.hpp"
#include "lbba/errors.hpp"
#include "lbba/ops.hpp"
#include "test_util.hpp"

using namespace lbba;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / "lbba_test_datapipe" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Label of record r in file f is (r + f) % 10; pixel i of record r is (r + i) % 256.
void write_cifar_batch(const fs::path& path, int f, int64_t records = 10000) {
  std::ofstream out(path, std::ios::binary);
  std::vector<unsigned char> rec(3073);
  for (int64_t r = 0; r < records; ++r) {
    rec[0] = static_cast<unsigned char>((r + f) % 10);
    for (int i = 0; i < 3072; ++i) rec[1 + static_cast<size_t>(i)] = static_cast<unsigned char>((r + i) % 256);
    out.write(reinterpret_cast<const char*>(rec.data()), 3073);
  }
}

const fs::path& cifar_fixture() {
  static const fs::path dir = [] {
    auto d = scratch("cifar");
    for (int f = 1; f <= 5; ++f) write_cifar_batch(d / ("data_batch_" + std::to_string(f) + ".bin"), f);
    write_cifar_batch(d / "test_batch.bin", 0);
    return d;
  }();
  return dir;
}

SampleSet synthetic(int per_class = 20, int hw = 8) {
  SyntheticSpec s;
  s.n_per_class = per_class;
  s.height = s.width = hw;
  return make_synthetic(s);
}

}  // namespace

TEST(Cifar, RecordLabelAndPixelsEcho) {
  ASSERT_TRUE(has_cifar10_binary(cifar_fixture()));
  auto [train, test] = load_cifar10_binary(cifar_fixture());
  EXPECT_EQ(train.size(), 50000);
  EXPECT_EQ(test.size(), 10000);
  EXPECT_EQ(train.labels[0], 1);  // record 0 of batch 1
  EXPECT_EQ(test.labels[0], 0);
  EXPECT_FLOAT_EQ(train.images.data()[255], 1.0f);
  EXPECT_FLOAT_EQ(train.images.data()[256], 0.0f);
  EXPECT_FLOAT_EQ(train.images.data()[3072 + 1], 2.0f / 255.0f);
  train.validate();
  test.validate();
}

TEST(Cifar, TrainHistogramIs5000PerClass) {
  auto [train, test] = load_cifar10_binary(cifar_fixture());
  std::vector<int> hist(10, 0);
  for (int l : train.labels) ++hist[static_cast<size_t>(l)];
  for (int h : hist) EXPECT_EQ(h, 5000);
}

TEST(Cifar, ShortFileNamesTheFile) {
  auto dir = scratch("cifar_short");
  for (int f = 1; f <= 5; ++f) fs::copy_file(cifar_fixture() / ("data_batch_" + std::to_string(f) + ".bin"),
                                             dir / ("data_batch_" + std::to_string(f) + ".bin"));
  write_cifar_batch(dir / "test_batch.bin", 0, 10);
  EXPECT_FALSE(has_cifar10_binary(dir));
  try {
    load_cifar10_binary(dir);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("test_batch.bin"), std::string::npos);
  }
}

TEST(Cifar, MissingFileIsDataError) {
  EXPECT_THROW(load_cifar10_binary(scratch("cifar_missing")), DataError);
}

TEST(Folder, TwoClassesThreeImages) {
  auto dir = scratch("folder");
  for (const char* cls : {"b_dog", "a_cat"}) {
    fs::create_directories(dir / cls);
    for (int i = 0; i < 3; ++i) {
      Tensor img({1, 3, 5, 5}, cls[0] == 'a' ? 0.2f : 0.8f);
      write_png(dir / cls / ("img" + std::to_string(i) + ".png"), img, 0);
    }
  }
  SampleSet s = load_folder_dataset(dir, 4, 4);
  EXPECT_EQ(s.size(), 6);
  EXPECT_EQ(s.class_count, 2);
  EXPECT_EQ(s.labels, (std::vector<int>{0, 0, 0, 1, 1, 1}));
  EXPECT_NEAR(s.images.data()[0], 51.0f / 255.0f, 1e-6);  // a_cat sorts first
}

TEST(Folder, EmptyClassFolderIsDataError) {
  auto dir = scratch("folder_empty");
  fs::create_directories(dir / "a");
  fs::create_directories(dir / "b");
  write_png(dir / "a" / "x.png", Tensor({1, 3, 4, 4}, 0.5f), 0);
  EXPECT_THROW(load_folder_dataset(dir, 4, 4), DataError);
}

TEST(Folder, NonSquareIsCenterCroppedThenResized) {
  auto dir = scratch("folder_crop");
  fs::create_directories(dir / "a");
  // 4 rows x 8 cols: the outer two columns on each side are white.
  Tensor img({1, 3, 4, 8}, 0.0f);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 4; ++y)
      for (int x : {0, 1, 6, 7}) img.data()[(c * 4 + y) * 8 + x] = 1.0f;
  write_png(dir / "a" / "wide.png", img, 0);
  SampleSet s = load_folder_dataset(dir, 6, 6);
  EXPECT_EQ(s.images.shape(), (Shape{1, 3, 6, 6}));
  for (real v : s.images.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Png, RoundTripIsExactAtByteResolution) {
  auto dir = scratch("png");
  Tensor img({1, 3, 2, 2}, std::vector<real>{0, 1, 0.5f, 0.25f, 1, 0, 0, 1, 0.2f, 0.4f, 0.6f, 0.8f});
  fs::create_directories(dir / "c");
  write_png(dir / "c" / "x.png", img, 0);
  SampleSet s = load_folder_dataset(dir, 2, 2);
  for (int i = 0; i < 12; ++i) EXPECT_NEAR(s.images.data()[i], img.data()[i], 0.5 / 255.0 + 1e-6);
}

TEST(FewShot, HundredPerClassGivesThousandBalanced) {
  SampleSet pool = synthetic(120, 4);
  SampleSet fs100 = sample_few_shot(pool, {100, 0}, 7);
  EXPECT_EQ(fs100.size(), 1000);
  std::vector<int> hist(10, 0);
  for (int l : fs100.labels) ++hist[static_cast<size_t>(l)];
  for (int h : hist) EXPECT_EQ(h, 100);
  EXPECT_EQ(sample_few_shot(pool, {1, 0}, 7).size(), 10);
}

TEST(FewShot, DeterministicUnderSeed) {
  SampleSet pool = synthetic();
  auto a = sample_few_shot(pool, {3, 0}, 11);
  auto b = sample_few_shot(pool, {3, 0}, 11);
  auto c = sample_few_shot(pool, {3, 0}, 12);
  EXPECT_EQ(a.provenance.indices, b.provenance.indices);
  EXPECT_NE(a.provenance.indices, c.provenance.indices);
  EXPECT_TRUE(lbba::testing::bit_equal(a.images, b.images));
}

TEST(FewShot, SelectedImagesMatchParentIndices) {
  SampleSet pool = synthetic();
  auto a = sample_few_shot(pool, {2, 0}, 3);
  for (int64_t i = 0; i < a.size(); ++i) {
    const int64_t src = a.provenance.indices[static_cast<size_t>(i)];
    EXPECT_EQ(a.labels[static_cast<size_t>(i)], pool.labels[static_cast<size_t>(src)]);
    const int64_t per = 3 * 8 * 8;
    EXPECT_TRUE(std::equal(a.images.ptr() + i * per, a.images.ptr() + (i + 1) * per, pool.images.ptr() + src * per));
  }
}

TEST(FewShot, TotalModeSpreadsOverClasses) {
  SampleSet pool = synthetic();
  auto two = sample_few_shot(pool, {0, 2}, 5);
  ASSERT_EQ(two.size(), 2);
  EXPECT_NE(two.labels[0], two.labels[1]);
  auto many = sample_few_shot(pool, {0, 25}, 5);
  std::vector<int> hist(10, 0);
  for (int l : many.labels) ++hist[static_cast<size_t>(l)];
  EXPECT_LE(*std::max_element(hist.begin(), hist.end()) - *std::min_element(hist.begin(), hist.end()), 1);
}

TEST(FewShot, InsufficientSamplesIsDataError) {
  SampleSet pool = synthetic(5);
  EXPECT_THROW(sample_few_shot(pool, {6, 0}, 0), DataError);
  EXPECT_THROW(sample_few_shot(pool, {0, 51}, 0), DataError);
  EXPECT_THROW(sample_few_shot(pool, {1, 1}, 0), ConfigError);
}

TEST(FewShot, ManifestRoundTripAndDisjointness) {
  auto dir = scratch("manifest");
  SampleSet pool = synthetic();
  pool.provenance.split = "test";
  auto few = sample_few_shot(pool, {1, 0}, 9);
  write_manifest(dir / "few_shot.json", few_shot_manifest(few));
  auto m = read_manifest(dir / "few_shot.json");
  EXPECT_EQ(m.at("indices").get<std::vector<int64_t>>(), few.provenance.indices);
  EXPECT_EQ(m.at("seed").get<uint64_t>(), 9u);
  EXPECT_NO_THROW(require_disjoint(m, pool.provenance.dataset, "train"));
  EXPECT_THROW(require_disjoint(m, pool.provenance.dataset, "test"), ProvenanceError);
}

TEST(Augment, DisabledPolicyIsIdentity) {
  SampleSet s = synthetic(1);
  AugmentationPolicy p;
  p.enabled = false;
  Rng rng(1);
  Tensor img = s.gather(std::vector<int64_t>{0});
  Tensor one = reshape(img, {3, 8, 8});
  EXPECT_TRUE(lbba::testing::bit_equal(augment(one, p, rng), one));
}

TEST(Augment, GrayscaleMakesChannelsEqual) {
  SampleSet s = synthetic(1);
  AugmentationPolicy p;
  p.grayscale_p = 1.0;
  Rng rng(2);
  Tensor out = augment(reshape(s.gather(std::vector<int64_t>{3}), {3, 8, 8}), p, rng);
  for (int i = 0; i < 64; ++i) {
    EXPECT_EQ(out.data()[i], out.data()[64 + i]);
    EXPECT_EQ(out.data()[i], out.data()[128 + i]);
  }
}

TEST(Augment, TenThousandSamplesStayInRangeAndShape) {
  SampleSet s = synthetic(10, 8);
  AugmentationPolicy p;
  p.brightness = p.contrast = p.saturation = 0.9;
  p.hue = 0.5;
  std::vector<int64_t> idx(100);
  std::iota(idx.begin(), idx.end(), 0);
  for (uint64_t epoch = 0; epoch < 100; ++epoch) {
    Tensor b = augment_batch(s, idx, p, 3, epoch);
    ASSERT_EQ(b.shape(), (Shape{100, 3, 8, 8}));
    for (real v : b.data()) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
  }
}

TEST(Augment, TwoViewsAreIndependentDraws) {
  SampleSet s = synthetic(1);
  AugmentationPolicy p;
  Rng rng(4);
  auto [a, b] = two_views(reshape(s.gather(std::vector<int64_t>{0}), {3, 8, 8}), p, rng);
  EXPECT_FALSE(lbba::testing::bit_equal(a, b));
}

TEST(Augment, BatchStreamsAreDeterministicAndIndexed) {
  SampleSet s = synthetic(2);
  AugmentationPolicy p;
  std::vector<int64_t> ab{0, 1}, ba{1, 0};
  Tensor x = augment_batch(s, ab, p, 5, 2);
  Tensor y = augment_batch(s, ab, p, 5, 2);
  Tensor z = augment_batch(s, ba, p, 5, 2);
  EXPECT_TRUE(lbba::testing::bit_equal(x, y));
  // Sample 0's augmentation does not depend on its position in the batch.
  EXPECT_TRUE(std::equal(x.ptr(), x.ptr() + 192, z.ptr() + 192));
  EXPECT_FALSE(lbba::testing::bit_equal(x, augment_batch(s, ab, p, 5, 3)));
}

TEST(Augment, InvalidPolicyIsConfigError) {
  AugmentationPolicy p;
  p.flip_p = 1.5;
  EXPECT_THROW(p.validate(), ConfigError);
  p = {};
  p.crop_scale_min = 0.0;
  EXPECT_THROW(p.validate(), ConfigError);
}

TEST(Augment, PadCropFlipKeepsShapeAndRange) {
  SampleSet s = synthetic(2);
  std::vector<int64_t> idx{0, 5, 19};
  Tensor b = pad_crop_flip_batch(s, idx, 2, 1, 0);
  EXPECT_EQ(b.shape(), (Shape{3, 3, 8, 8}));
  for (real v : b.data()) EXPECT_TRUE(v >= 0.0f && v <= 1.0f);
}

TEST(Rotate90, ExplicitQuarterTurn) {
  // [[a b] [c d]] counter-clockwise -> [[b d] [a c]]
  Tensor x({1, 2, 2}, std::vector<real>{1, 2, 3, 4});
  Tensor r = rotate90(x, 1);
  EXPECT_EQ(std::vector<real>(r.data().begin(), r.data().end()), (std::vector<real>{2, 4, 1, 3}));
}

TEST(Rotate90, GroupProperties) {
  std::mt19937_64 rng(9);
  Tensor x = lbba::testing::random_tensor({2, 3, 5, 5}, rng);
  EXPECT_TRUE(lbba::testing::bit_equal(rotate90(x, 0), x));
  EXPECT_TRUE(lbba::testing::bit_equal(rotate90(rotate90(rotate90(rotate90(x, 1), 1), 1), 1), x));
  EXPECT_TRUE(lbba::testing::bit_equal(rotate90(rotate90(x, 1), 3), x));
  EXPECT_TRUE(lbba::testing::bit_equal(rotate90(rotate90(x, 1), 1), rotate90(x, 2)));
  for (int k = 0; k < 4; ++k) {
    Tensor r = rotate90(x, k);
    std::multiset<real> a(x.data().begin(), x.data().end()), b(r.data().begin(), r.data().end());
    EXPECT_EQ(a, b);
  }
}

TEST(Rotate90, NonSquareIsDimensionError) {
  EXPECT_THROW(rotate90(Tensor::zeros({3, 4, 5}), 1), DimensionError);
}

TEST(Synthetic, DeterministicLabeledAndInRange) {
  SampleSet a = synthetic(), b = synthetic();
  EXPECT_TRUE(lbba::testing::bit_equal(a.images, b.images));
  EXPECT_EQ(a.size(), 200);
  a.validate();
  SyntheticSpec other;
  other.n_per_class = 20;
  other.height = other.width = 8;
  other.sample_seed = 2;
  EXPECT_FALSE(lbba::testing::bit_equal(make_synthetic(other).images, a.images));
}
