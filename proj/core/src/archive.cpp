#include "lbba/archive.hpp"

#include <fstream>

#include "lbba/checkpoint.hpp"
#include "lbba/data.hpp"
#include "lbba/errors.hpp"

namespace lbba {
inline namespace LBBA_PRECISION_NS {

namespace {

constexpr const char* kManifest = "manifest.json";
constexpr const char* kTensors = "x_adv.lbt";

}  // namespace

nlohmann::json AdversarialArchive::manifest() const {
  nlohmann::json examples = nlohmann::json::array();
  for (size_t i = 0; i < sources.size(); ++i) {
    examples.push_back({{"source_index", sources[i]},
                        {"guide_index", i < guides.size() ? guides[i] : -1},
                        {"label", i < labels.size() ? labels[i] : -1},
                        {"final_objective", i < final_objective.size() ? final_objective[i] : 0.0}});
  }
  return {{"kind", "adversarial-archive"},
          {"version", 1},
          {"config", config},
          {"config_hash", config_hash},
          {"surrogate_hash", surrogate_hash},
          {"pool", pool},
          {"seed", seed},
          {"count", sources.size()},
          {"examples", examples}};
}

void write_archive(const std::filesystem::path& dir, const AdversarialArchive& archive, bool export_png) {
  if (archive.x_adv.rank() != 4 || archive.x_adv.dim(0) != static_cast<int64_t>(archive.sources.size())) {
    throw DimensionError("archive: x_adv rows must match the source list");
  }
  std::filesystem::create_directories(dir);
  TensorFile file;
  file.header = {{"kind", "adversarial-set"}, {"config_hash", archive.config_hash}};
  file.tensors.push_back({"x_adv", archive.x_adv});
  write_tensor_file(dir / kTensors, file);
  std::ofstream out(dir / kManifest);
  if (!out) throw DataError("cannot write " + (dir / kManifest).string());
  out << archive.manifest().dump(2) << "\n";
  if (export_png) {
    // Lossy 8-bit copies; not canonical.
    const auto png = dir / "png";
    std::filesystem::create_directories(png);
    for (int64_t i = 0; i < archive.x_adv.dim(0); ++i) {
      write_png(png / (std::to_string(i) + ".png"), archive.x_adv, i);
    }
  }
}

AdversarialArchive read_archive(const std::filesystem::path& dir) {
  std::ifstream in(dir / kManifest);
  if (!in) throw DataError("no archive manifest in " + dir.string());
  AdversarialArchive a;
  try {
    const auto m = nlohmann::json::parse(in);
    if (m.at("kind") != "adversarial-archive") throw DataError(dir.string() + " is not an adversarial archive");
    a.config = m.at("config");
    a.config_hash = m.at("config_hash").get<std::string>();
    a.surrogate_hash = m.at("surrogate_hash").get<std::string>();
    a.pool = m.at("pool");
    a.seed = m.at("seed").get<uint64_t>();
    for (const auto& e : m.at("examples")) {
      a.sources.push_back(e.at("source_index").get<int64_t>());
      a.guides.push_back(e.at("guide_index").get<int64_t>());
      a.labels.push_back(e.at("label").get<int>());
      a.final_objective.push_back(e.at("final_objective").get<double>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("corrupt archive manifest in " + dir.string() + ": " + e.what());
  }
  try {
    a.x_adv = read_tensor_file(dir / kTensors).get("x_adv");
  } catch (const CheckpointError& e) {
    throw DataError(std::string("archive tensors: ") + e.what());
  }
  if (a.x_adv.dim(0) != static_cast<int64_t>(a.sources.size())) {
    throw DataError("archive in " + dir.string() + " lists " + std::to_string(a.sources.size()) +
                    " examples but stores " + std::to_string(a.x_adv.dim(0)));
  }
  return a;
}

}  // namespace LBBA_PRECISION_NS
}  // namespace lbba
