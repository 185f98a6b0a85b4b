#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tsgf/saliency.hpp"
#include "tsgf/tensor.hpp"

namespace tsgf {

struct VideoSample {
  Tensor video;  // [T,C,H,W], pixels in [0,1]
  int label = 0;
  std::vector<double> soft_label;  // empty, or a distribution summing to 1
  std::string id;
};

/// One toy class: a shape plus how it moves. Movement happens along the wrap
/// axis (horizontal for squares, vertical for discs) so the object's pixel
/// area is constant in every frame.
struct ClassSpec {
  enum class Shape { Square, Disc };
  enum class Motion { Static, Constant, Oscillate };
  Shape shape = Shape::Square;
  Motion motion = Motion::Static;
  int speed = 0;      // per-frame displacement for Constant
  int amplitude = 0;  // oscillation half-range in pixels
  int period = 8;     // oscillation period in frames
};

/// Procedural dataset recipe. The default class family contains two pairs
/// that are pixel-identical per frame and differ only in motion direction,
/// so frame appearance alone cannot separate them.
struct ToySpec {
  std::int64_t frames = 16;
  std::int64_t channels = 1;
  std::int64_t height = 16;
  std::int64_t width = 16;
  double noise = 0.02;
  std::int64_t train_per_class = 50;
  std::int64_t val_per_class = 10;
  std::int64_t test_per_class = 20;
  std::uint64_t seed = 0;
  std::vector<ClassSpec> class_specs;

  std::int64_t classes() const { return static_cast<std::int64_t>(class_specs.size()); }
  static ToySpec defaults();
};

struct ToyDataset {
  std::vector<VideoSample> train, val, test;
};

/// The synthetic set S plus its provenance. samples[c*ipc + k] is the k-th
/// synthetic video of class c.
struct DistilledDataset {
  std::vector<VideoSample> samples;
  std::int64_t ipc = 0;
  std::int64_t classes = 0;
  std::string teacher_hash;  // hex digest of the teacher checkpoint, "" if none
  std::string init_method;   // "real" or "noise"
  bool recalibrated = false;
  std::string config_json;               // distillation config snapshot
  std::vector<SaliencyProfile> profiles;  // parallel to samples once distilled
};

ToyDataset generate_toy_dataset(const ToySpec& spec);

enum class InitMethod { Real, Noise };
const char* init_method_name(InitMethod m);

DistilledDataset init_synthetic(InitMethod method, const std::vector<VideoSample>& train,
                                std::int64_t classes, std::int64_t ipc,
                                std::uint64_t seed);

void save_distilled(const DistilledDataset& ds, const std::filesystem::path& dir);
DistilledDataset load_distilled(const std::filesystem::path& dir);

/// Frame-folder ingestion: dir contains one subdirectory of numbered PGM/PPM
/// frames per video and a labels file mapping "id,class".
struct IngestLayout {
  std::int64_t frames = 16;
  std::string labels_file = "labels.csv";
};

std::vector<VideoSample> ingest_frame_directory(const std::filesystem::path& dir,
                                                const IngestLayout& layout);

/// Uniform-stride resampling: index i of T selects floor(i*n/T) of n.
std::vector<std::int64_t> resample_indices(std::int64_t available, std::int64_t target);

}  // namespace tsgf
