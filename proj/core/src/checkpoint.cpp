#include "lbba/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include "lbba/hash.hpp"

namespace lbba {
inline namespace LBBA_PRECISION_NS {

namespace {

constexpr char kMagic[4] = {'L', 'B', 'B', 'A'};

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    T out;
    auto* src = reinterpret_cast<const unsigned char*>(&v);
    auto* dst = reinterpret_cast<unsigned char*>(&out);
    for (size_t i = 0; i < sizeof(T); ++i) dst[i] = src[sizeof(T) - 1 - i];
    return out;
  } else {
    return v;
  }
}

size_t align_up(size_t v) { return (v + kPayloadAlignment - 1) / kPayloadAlignment * kPayloadAlignment; }

[[noreturn]] void fail(CheckpointErrorCode c, const std::filesystem::path& p, const std::string& why) {
  throw CheckpointError(c, p.string() + ": " + why);
}

}  // namespace

std::string to_string(CheckpointErrorCode c) {
  switch (c) {
  case CheckpointErrorCode::io:
    return "io-error";
  case CheckpointErrorCode::corrupt_manifest:
    return "corrupt-manifest";
  case CheckpointErrorCode::unknown_version:
    return "unknown-version";
  case CheckpointErrorCode::shape_mismatch:
    return "shape-mismatch";
  case CheckpointErrorCode::spec_mismatch:
    return "spec-mismatch";
  }
  return "unknown";
}

const Tensor& TensorFile::get(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t.tensor;
  throw CheckpointError(CheckpointErrorCode::shape_mismatch, "missing tensor '" + name + "'");
}

void write_tensor_file(const std::filesystem::path& path, const TensorFile& file) {
  // Offsets depend on the manifest length, which depends on the offsets'
  // digits; iterate until the layout is stable.
  nlohmann::json manifest;
  std::vector<size_t> offsets(file.tensors.size());
  size_t start = 0;
  for (int pass = 0; pass < 8; ++pass) {
    size_t cursor = start;
    nlohmann::json entries = nlohmann::json::array();
    for (size_t i = 0; i < file.tensors.size(); ++i) {
      const auto& t = file.tensors[i];
      offsets[i] = cursor;
      const size_t bytes = static_cast<size_t>(t.tensor.numel()) * sizeof(float);
      entries.push_back({{"name", t.name},
                         {"shape", t.tensor.shape()},
                         {"offset", cursor},
                         {"bytes", bytes},
                         {"attrs", t.attrs}});
      cursor = align_up(cursor + bytes);
    }
    manifest = {{"format", "lbba-tensors"}, {"header", file.header}, {"tensors", entries}};
    const size_t next = align_up(16 + manifest.dump().size());
    if (next == start) break;
    start = next;
  }
  const std::string text = manifest.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(CheckpointErrorCode::io, path, "cannot open for writing");
  const uint32_t version = to_little(kTensorFileVersion);
  const uint64_t len = to_little(static_cast<uint64_t>(text.size()));
  out.write(kMagic, 4);
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  size_t pos = 16 + text.size();
  const std::vector<char> zeros(kPayloadAlignment, 0);
  for (size_t i = 0; i < file.tensors.size(); ++i) {
    out.write(zeros.data(), static_cast<std::streamsize>(offsets[i] - pos));
    pos = offsets[i];
    auto values = file.tensors[i].tensor.data();
    if constexpr (std::endian::native == std::endian::little) {
      out.write(reinterpret_cast<const char*>(values.data()),
                static_cast<std::streamsize>(values.size_bytes()));
    } else {
      for (float v : values) {
        const float le = to_little(v);
        out.write(reinterpret_cast<const char*>(&le), sizeof(le));
      }
    }
    pos += values.size_bytes();
  }
  if (!out) fail(CheckpointErrorCode::io, path, "write failed");
}

TensorFile read_tensor_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(CheckpointErrorCode::io, path, "cannot open");
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 16) fail(CheckpointErrorCode::corrupt_manifest, path, "file shorter than header");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) fail(CheckpointErrorCode::corrupt_manifest, path, "bad magic");
  uint32_t version = 0;
  uint64_t len = 0;
  std::memcpy(&version, bytes.data() + 4, sizeof(version));
  std::memcpy(&len, bytes.data() + 8, sizeof(len));
  version = to_little(version);
  len = to_little(len);
  if (version != kTensorFileVersion) {
    fail(CheckpointErrorCode::unknown_version, path, "version " + std::to_string(version));
  }
  if (len > bytes.size() - 16) fail(CheckpointErrorCode::corrupt_manifest, path, "manifest truncated");

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(len));
  } catch (const nlohmann::json::exception& e) {
    fail(CheckpointErrorCode::corrupt_manifest, path, e.what());
  }
  TensorFile file;
  try {
    if (manifest.at("format") != "lbba-tensors") {
      fail(CheckpointErrorCode::corrupt_manifest, path, "unexpected format tag");
    }
    file.header = manifest.at("header");
    for (const auto& e : manifest.at("tensors")) {
      NamedTensor t;
      t.name = e.at("name").get<std::string>();
      const auto shape = e.at("shape").get<Shape>();
      const auto offset = e.at("offset").get<size_t>();
      const auto nbytes = e.at("bytes").get<size_t>();
      t.attrs = e.value("attrs", nlohmann::json::object());
      if (static_cast<size_t>(shape_numel(shape)) * sizeof(float) != nbytes) {
        fail(CheckpointErrorCode::shape_mismatch, path, "tensor '" + t.name + "' byte count disagrees with shape");
      }
      if (offset % kPayloadAlignment != 0 || offset < 16 + len || offset + nbytes > bytes.size()) {
        fail(CheckpointErrorCode::corrupt_manifest, path, "tensor '" + t.name + "' payload out of bounds");
      }
      std::vector<float> values(nbytes / sizeof(float));
      std::memcpy(values.data(), bytes.data() + offset, nbytes);
      if constexpr (std::endian::native == std::endian::big) {
        for (auto& v : values) v = to_little(v);
      }
      t.tensor = Tensor(shape, std::move(values));
      file.tensors.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(CheckpointErrorCode::corrupt_manifest, path, e.what());
  }
  return file;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path, const nlohmann::json& extra) {
  TensorFile file;
  const auto& meta = model.params().meta;
  file.header = {{"kind", "checkpoint"},
                 {"spec", model.spec().to_json()},
                 {"spec_hash", model.spec().hash()},
                 {"seed", meta.seed},
                 {"epoch", meta.epoch},
                 {"provenance", extra}};
  for (const auto& e : model.params().entries()) {
    file.tensors.push_back({e.name, e.tensor, {{"trainable", e.trainable}}});
  }
  write_tensor_file(path, file);
}

std::string model_hash(const Model& model) {
  Sha256 h;
  h.update(model.spec().hash());
  for (const auto& e : model.params().entries()) {
    h.update(e.name);
    h.update(std::span<const float>(e.tensor.data().data(), e.tensor.data().size()));
  }
  return h.hex();
}

nlohmann::json read_checkpoint_header(const std::filesystem::path& path) {
  return read_tensor_file(path).header;
}

Model load_checkpoint(const std::filesystem::path& path, const NetworkSpec* expected) {
  TensorFile file = read_tensor_file(path);
  NetworkSpec spec;
  std::string stored_hash;
  try {
    if (file.header.at("kind") != "checkpoint") {
      fail(CheckpointErrorCode::corrupt_manifest, path, "not a model checkpoint");
    }
    spec = NetworkSpec::from_json(file.header.at("spec"));
    stored_hash = file.header.at("spec_hash").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    fail(CheckpointErrorCode::corrupt_manifest, path, e.what());
  } catch (const ConfigError& e) {
    fail(CheckpointErrorCode::corrupt_manifest, path, e.what());
  }
  if (spec.hash() != stored_hash) fail(CheckpointErrorCode::corrupt_manifest, path, "spec hash does not match spec");
  if (expected && expected->hash() != stored_hash) {
    fail(CheckpointErrorCode::spec_mismatch, path, "checkpoint written for a different network spec");
  }
  Model model = build(spec, file.header.value("seed", uint64_t{0}));
  auto& store = model.params();
  if (store.entries().size() != file.tensors.size()) {
    fail(CheckpointErrorCode::shape_mismatch, path, "parameter count differs from architecture");
  }
  for (const auto& t : file.tensors) {
    if (!store.contains(t.name)) fail(CheckpointErrorCode::shape_mismatch, path, "unknown tensor '" + t.name + "'");
    Tensor& dst = store.get(t.name);
    if (dst.shape() != t.tensor.shape()) {
      fail(CheckpointErrorCode::shape_mismatch, path, "tensor '" + t.name + "' has shape " +
                                                          shape_str(t.tensor.shape()) + ", expected " +
                                                          shape_str(dst.shape()));
    }
    std::copy(t.tensor.data().begin(), t.tensor.data().end(), dst.data().begin());
  }
  store.meta.epoch = file.header.value("epoch", 0);
  return model;
}

}  // namespace LBBA_PRECISION_NS
}  // namespace lbba
