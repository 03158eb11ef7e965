#include "lbba/data.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <numbers>

#include "lbba/errors.hpp"
#include "lbba/rng.hpp"

namespace lbba {
inline namespace LBBA_PRECISION_NS {

namespace fs = std::filesystem;

nlohmann::json Provenance::to_json() const {
  nlohmann::json j{{"dataset", dataset}, {"split", split}, {"mode", mode}, {"indices", indices}};
  j["seed"] = seed ? nlohmann::json(*seed) : nlohmann::json(nullptr);
  return j;
}

Provenance Provenance::from_json(const nlohmann::json& j) {
  Provenance p;
  p.dataset = j.at("dataset").get<std::string>();
  p.split = j.at("split").get<std::string>();
  p.mode = j.value("mode", "");
  if (j.contains("seed") && !j.at("seed").is_null()) p.seed = j.at("seed").get<uint64_t>();
  p.indices = j.value("indices", std::vector<int64_t>{});
  return p;
}

Tensor SampleSet::gather(std::span<const int64_t> idx) const {
  const int64_t per = images.numel() / std::max<int64_t>(size(), 1);
  Tensor out({static_cast<int64_t>(idx.size()), images.dim(1), images.dim(2), images.dim(3)});
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= size()) throw DataError("sample index out of range");
    std::copy_n(images.ptr() + idx[i] * per, per, out.ptr() + static_cast<int64_t>(i) * per);
  }
  return out;
}

std::vector<int> SampleSet::gather_labels(std::span<const int64_t> idx) const {
  if (!has_labels()) throw DataError("sample set '" + provenance.dataset + "' has no labels");
  std::vector<int> out;
  out.reserve(idx.size());
  for (int64_t i : idx) out.push_back(labels.at(static_cast<size_t>(i)));
  return out;
}

SampleSet SampleSet::subset(std::span<const int64_t> idx) const {
  SampleSet s;
  s.images = gather(idx);
  if (has_labels()) s.labels = gather_labels(idx);
  s.class_count = class_count;
  s.provenance = provenance;
  s.provenance.indices.clear();
  for (int64_t i : idx) {
    s.provenance.indices.push_back(provenance.indices.empty() ? i : provenance.indices.at(static_cast<size_t>(i)));
  }
  return s;
}

void SampleSet::validate() const {
  for (real v : images.data()) {
    if (!(v >= 0.0f && v <= 1.0f)) throw DataError("image values must lie in [0,1]");
  }
  for (int l : labels) {
    if (l < 0 || l >= class_count) throw DataError("label " + std::to_string(l) + " outside class range");
  }
  if (has_labels() && static_cast<int64_t>(labels.size()) != size()) {
    throw DataError("label count does not match image count");
  }
}

namespace {

constexpr int64_t kCifarRecord = 3073;
constexpr int64_t kCifarPerFile = 10000;

fs::path cifar_root(const fs::path& dir) {
  if (fs::exists(dir / "data_batch_1.bin")) return dir;
  if (fs::exists(dir / "cifar-10-batches-bin" / "data_batch_1.bin")) return dir / "cifar-10-batches-bin";
  return dir;
}

SampleSet read_cifar_files(const std::vector<fs::path>& files, const std::string& split) {
  SampleSet s;
  const int64_t n = kCifarPerFile * static_cast<int64_t>(files.size());
  s.images = Tensor({n, 3, 32, 32});
  s.labels.resize(static_cast<size_t>(n));
  s.class_count = 10;
  s.provenance.dataset = "cifar10";
  s.provenance.split = split;
  std::vector<unsigned char> buf(static_cast<size_t>(kCifarRecord * kCifarPerFile));
  int64_t at = 0;
  for (const auto& f : files) {
    std::ifstream in(f, std::ios::binary);
    if (!in) throw DataError("cannot open CIFAR-10 batch " + f.string());
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() != static_cast<std::streamsize>(buf.size())) {
      throw DataError("short CIFAR-10 batch " + f.string() + ": " + std::to_string(in.gcount()) + " of " +
                      std::to_string(buf.size()) + " bytes");
    }
    for (int64_t r = 0; r < kCifarPerFile; ++r, ++at) {
      const unsigned char* rec = buf.data() + r * kCifarRecord;
      if (rec[0] > 9) throw DataError("bad label byte in " + f.string());
      s.labels[static_cast<size_t>(at)] = rec[0];
      real* dst = s.images.ptr() + at * 3072;
      for (int i = 0; i < 3072; ++i) dst[i] = static_cast<real>(rec[1 + i]) / 255.0f;
    }
  }
  return s;
}

struct PngImage {
  int width = 0;
  int height = 0;
  std::vector<unsigned char> rgb;  // 3 bytes per pixel
};

PngImage read_png_rgb(const fs::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw DataError("cannot read PNG " + path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  PngImage out;
  out.width = static_cast<int>(image.width);
  out.height = static_cast<int>(image.height);
  out.rgb.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, out.rgb.data(), 0, nullptr)) {
    png_image_free(&image);
    throw DataError("cannot decode PNG " + path.string() + ": " + image.message);
  }
  return out;
}

// Center crop to the aspect ratio of (h, w), then bilinear resize.
void crop_resize(const PngImage& img, int h, int w, int channels, real* dst) {
  const double target = static_cast<double>(w) / h;
  double cw = img.width, ch = img.height;
  if (cw / ch > target) {
    cw = ch * target;
  } else {
    ch = cw / target;
  }
  const double x0 = (img.width - cw) / 2.0, y0 = (img.height - ch) / 2.0;
  auto px = [&](int x, int y, int c) {
    x = std::clamp(x, 0, img.width - 1);
    y = std::clamp(y, 0, img.height - 1);
    return img.rgb[(static_cast<size_t>(y) * img.width + x) * 3 + c] / 255.0;
  };
  for (int i = 0; i < h; ++i) {
    const double sy = std::clamp(y0 + (i + 0.5) * ch / h - 0.5, y0, y0 + ch - 1.0);
    const int yi = static_cast<int>(std::floor(sy));
    const double fy = sy - yi;
    for (int j = 0; j < w; ++j) {
      const double sx = std::clamp(x0 + (j + 0.5) * cw / w - 0.5, x0, x0 + cw - 1.0);
      const int xi = static_cast<int>(std::floor(sx));
      const double fx = sx - xi;
      const int xj = std::min(xi + 1, static_cast<int>(std::floor(x0 + cw - 1.0)));
      const int yj = std::min(yi + 1, static_cast<int>(std::floor(y0 + ch - 1.0)));
      double rgb[3];
      for (int c = 0; c < 3; ++c) {
        rgb[c] = (1 - fy) * ((1 - fx) * px(xi, yi, c) + fx * px(xj, yi, c)) +
                 fy * ((1 - fx) * px(xi, yj, c) + fx * px(xj, yj, c));
      }
      if (channels == 1) {
        dst[i * w + j] = static_cast<real>(std::clamp(0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2], 0.0, 1.0));
      } else {
        for (int c = 0; c < 3; ++c) dst[(c * h + i) * w + j] = static_cast<real>(std::clamp(rgb[c], 0.0, 1.0));
      }
    }
  }
}

bool is_png(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png";
}

}  // namespace

bool has_cifar10_binary(const fs::path& dir) {
  const auto root = cifar_root(dir);
  for (const char* f : {"data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin",
                        "data_batch_5.bin", "test_batch.bin"}) {
    std::error_code ec;
    if (!fs::exists(root / f, ec) || fs::file_size(root / f, ec) != kCifarRecord * kCifarPerFile) return false;
  }
  return true;
}

std::pair<SampleSet, SampleSet> load_cifar10_binary(const fs::path& dir) {
  const auto root = cifar_root(dir);
  std::vector<fs::path> train;
  for (int i = 1; i <= 5; ++i) train.push_back(root / ("data_batch_" + std::to_string(i) + ".bin"));
  return {read_cifar_files(train, "train"), read_cifar_files({root / "test_batch.bin"}, "test")};
}

SampleSet load_folder_dataset(const fs::path& dir, int height, int width, int channels) {
  if (channels != 1 && channels != 3) throw ConfigError("folder datasets load 1 or 3 channels");
  if (!fs::is_directory(dir)) throw DataError("dataset folder " + dir.string() + " does not exist");
  std::vector<fs::path> classes;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_directory()) classes.push_back(e.path());
  }
  std::sort(classes.begin(), classes.end());
  if (classes.empty()) throw DataError("dataset folder " + dir.string() + " has no class subdirectories");
  std::vector<std::pair<fs::path, int>> files;
  for (size_t c = 0; c < classes.size(); ++c) {
    std::vector<fs::path> imgs;
    for (const auto& e : fs::directory_iterator(classes[c])) {
      if (e.is_regular_file() && is_png(e.path())) imgs.push_back(e.path());
    }
    if (imgs.empty()) throw DataError("class folder " + classes[c].string() + " contains no PNG images");
    std::sort(imgs.begin(), imgs.end());
    for (auto& p : imgs) files.emplace_back(p, static_cast<int>(c));
  }
  SampleSet s;
  const int64_t n = static_cast<int64_t>(files.size());
  s.images = Tensor({n, channels, height, width});
  s.class_count = static_cast<int>(classes.size());
  s.provenance.dataset = dir.filename().string();
  s.provenance.split = "folder";
  const int64_t per = static_cast<int64_t>(channels) * height * width;
  for (int64_t i = 0; i < n; ++i) {
    crop_resize(read_png_rgb(files[static_cast<size_t>(i)].first), height, width, channels, s.images.ptr() + i * per);
    s.labels.push_back(files[static_cast<size_t>(i)].second);
  }
  return s;
}

void write_png(const fs::path& path, const Tensor& images, int64_t index) {
  const int64_t c = images.dim(1), h = images.dim(2), w = images.dim(3);
  if (c != 1 && c != 3) throw ConfigError("PNG export needs 1 or 3 channels");
  std::vector<unsigned char> buf(static_cast<size_t>(c * h * w));
  const real* src = images.ptr() + index * c * h * w;
  for (int64_t i = 0; i < h; ++i)
    for (int64_t j = 0; j < w; ++j)
      for (int64_t ch = 0; ch < c; ++ch) {
        const double v = std::clamp(static_cast<double>(src[(ch * h + i) * w + j]), 0.0, 1.0);
        buf[static_cast<size_t>((i * w + j) * c + ch)] = static_cast<unsigned char>(std::lround(v * 255.0));
      }
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(w);
  image.height = static_cast<png_uint_32>(h);
  image.format = c == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&image, path.c_str(), 0, buf.data(), 0, nullptr)) {
    throw DataError("cannot write PNG " + path.string() + ": " + image.message);
  }
}

SampleSet sample_few_shot(const SampleSet& set, FewShotRequest request, uint64_t seed) {
  if ((request.n_per_class > 0) == (request.n_total > 0)) {
    throw ConfigError("few-shot request needs exactly one of n_per_class and n_total");
  }
  if (!set.has_labels()) throw DataError("few-shot sampling needs a labeled set");
  std::vector<std::vector<int64_t>> by_class(static_cast<size_t>(set.class_count));
  for (int64_t i = 0; i < set.size(); ++i) by_class[static_cast<size_t>(set.labels[static_cast<size_t>(i)])].push_back(i);
  Rng rng = make_rng({seed, 0x5eed});
  for (auto& v : by_class) shuffle(v.begin(), v.end(), rng);

  std::vector<int64_t> chosen;
  if (request.n_per_class > 0) {
    for (size_t c = 0; c < by_class.size(); ++c) {
      if (static_cast<int>(by_class[c].size()) < request.n_per_class) {
        throw DataError("class " + std::to_string(c) + " has " + std::to_string(by_class[c].size()) +
                        " samples, " + std::to_string(request.n_per_class) + " requested");
      }
      chosen.insert(chosen.end(), by_class[c].begin(), by_class[c].begin() + request.n_per_class);
    }
  } else {
    if (request.n_total > set.size()) {
      throw DataError("requested " + std::to_string(request.n_total) + " samples from a set of " +
                      std::to_string(set.size()));
    }
    std::vector<size_t> order(by_class.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    shuffle(order.begin(), order.end(), rng);
    std::vector<size_t> taken(by_class.size(), 0);
    while (static_cast<int>(chosen.size()) < request.n_total) {
      bool progressed = false;
      for (size_t c : order) {
        if (static_cast<int>(chosen.size()) == request.n_total) break;
        if (taken[c] < by_class[c].size()) {
          chosen.push_back(by_class[c][taken[c]++]);
          progressed = true;
        }
      }
      if (!progressed) throw DataError("few-shot sampling ran out of samples");
    }
    // Class-major order, like per-class mode.
    std::stable_sort(chosen.begin(), chosen.end(), [&](int64_t a, int64_t b) {
      return set.labels[static_cast<size_t>(a)] < set.labels[static_cast<size_t>(b)];
    });
  }
  SampleSet out = set.subset(chosen);
  out.provenance.seed = seed;
  out.provenance.mode = request.n_per_class > 0 ? "per-class" : "total";
  return out;
}

nlohmann::json few_shot_manifest(const SampleSet& s) {
  nlohmann::json j = s.provenance.to_json();
  j["count"] = s.size();
  j["class_count"] = s.class_count;
  j["shape"] = s.images.shape();
  return j;
}

void write_manifest(const fs::path& path, const nlohmann::json& manifest) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest " + path.string());
  out << manifest.dump(2) << "\n";
}

nlohmann::json read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read manifest " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed manifest " + path.string() + ": " + e.what());
  }
}

void require_disjoint(const nlohmann::json& manifest, const std::string& dataset, const std::string& split) {
  const auto fs_dataset = manifest.at("dataset").get<std::string>();
  const auto fs_split = manifest.at("split").get<std::string>();
  if (fs_dataset == dataset && fs_split == split) {
    throw ProvenanceError("refusing to use " + dataset + "/" + split +
                          ": it contains the attacker's few-shot samples (" +
                          std::to_string(manifest.value("count", 0)) + " indices)");
  }
}

SampleSet make_synthetic(const SyntheticSpec& spec) {
  if (spec.classes < 2 || spec.n_per_class < 1) throw ConfigError("synthetic set needs >=2 classes and >=1 sample");
  const int c = spec.channels, h = spec.height, w = spec.width;
  struct Wave {
    double fx, fy, phase, amp;
  };
  struct Proto {
    std::vector<Wave> waves;
    std::vector<double> colour;
  };
  Rng prng = make_rng({spec.pattern_seed, 0x9a77});
  std::vector<Proto> protos(static_cast<size_t>(spec.classes));
  for (auto& p : protos) {
    for (int k = 0; k < 3; ++k) {
      const double angle = uniform(prng, 0.0, std::numbers::pi);
      const double freq = uniform(prng, 0.5, 3.0) * 2.0 * std::numbers::pi;
      p.waves.push_back({freq * std::cos(angle), freq * std::sin(angle), uniform(prng, 0.0, 6.283), uniform(prng, 0.5, 1.0)});
    }
    for (int ch = 0; ch < c; ++ch) p.colour.push_back(uniform(prng, -0.25, 0.25));
  }
  SampleSet s;
  const int64_t n = static_cast<int64_t>(spec.classes) * spec.n_per_class;
  s.images = Tensor({n, c, h, w});
  s.class_count = spec.classes;
  s.provenance.dataset = "synthetic-" + std::to_string(spec.pattern_seed);
  s.provenance.split = spec.split;
  Rng rng = make_rng({spec.sample_seed, 0x5a3e});
  std::normal_distribution<double> noise(0.0, spec.noise);
  int64_t at = 0;
  for (int k = 0; k < spec.classes; ++k) {
    const auto& p = protos[static_cast<size_t>(k)];
    for (int i = 0; i < spec.n_per_class; ++i, ++at) {
      const double dx = uniform(rng, -0.15, 0.15), dy = uniform(rng, -0.15, 0.15);
      const double contrast = uniform(rng, 0.6, 1.0);
      const double bright = uniform(rng, -0.1, 0.1);
      real* dst = s.images.ptr() + at * c * h * w;
      for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) {
            const double u = static_cast<double>(x) / w + dx, v = static_cast<double>(y) / h + dy;
            double val = 0.0;
            for (size_t q = 0; q < p.waves.size(); ++q) {
              const auto& wv = p.waves[q];
              val += wv.amp * std::sin(wv.fx * u + wv.fy * v + wv.phase + 0.7 * ch * static_cast<double>(q));
            }
            val = 0.5 + contrast * (0.18 * val + p.colour[static_cast<size_t>(ch)]) + bright + noise(rng);
            dst[(ch * h + y) * w + x] = static_cast<real>(std::clamp(val, 0.0, 1.0));
          }
      s.labels.push_back(k);
    }
  }
  return s;
}

}  // namespace LBBA_PRECISION_NS
}  // namespace lbba
