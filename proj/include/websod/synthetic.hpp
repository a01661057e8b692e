#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "websod/datamodel.hpp"

// Two-domain synthetic shapes benchmark: a cluttered "target" domain with
// box annotations and a clean "web" domain with image-level labels only.
namespace websod::synth {

struct SyntheticBenchmarkSpec {
  std::vector<std::string> classes{"circle", "square", "triangle", "cross", "diamond", "hbar", "hexagon", "star"};
  std::vector<std::string> novel{"hexagon", "star"};
  int image_size = 64;

  int target_train_count = 400;
  int target_test_count = 400;
  int target_full_count = 400;  // all classes, for the fully supervised reference
  int web_per_class = 80;

  int target_min_objects = 1;
  int target_max_objects = 3;
  double target_min_size = 14.0;
  double target_max_size = 30.0;
  double target_contrast = 0.75;  // object/background blend in the target domain
  double target_noise = 0.06;
  double target_texture = 0.18;

  double web_min_size = 22.0;
  double web_max_size = 32.0;
  double web_center_jitter = 6.0;
  double web_noise = 0.02;
  double web_distractor_prob = 0.9;
  double distractor_min_size = 14.0;
  double distractor_max_size = 22.0;

  std::uint64_t seed = 7;

  Vocabulary vocabulary() const { return Vocabulary(classes); }
  ClassSplit split() const;
  void validate() const;
};

/// True when normalised coordinates (u, v) in [-1,1]^2 fall inside `shape`.
bool shape_contains(const std::string& shape, double u, double v);

struct RenderedImage {
  Tensor image;
  std::vector<GroundTruth> objects;  // labelled objects only (web distractors excluded)
  std::vector<GroundTruth> distractors;
};

RenderedImage render_target_image(const SyntheticBenchmarkSpec& spec, std::span<const int> allowed_classes,
                                  std::mt19937_64& rng);
RenderedImage render_web_image(const SyntheticBenchmarkSpec& spec, int label, std::mt19937_64& rng);

/// Writes target-train/ (base classes only), target-test/ and target-full/
/// (all classes), web-train/ (manifest + images) and web-gt/ (hidden boxes for
/// diagnostics) plus benchmark.ini under `out_dir`.
void generate_synthetic_benchmark(const SyntheticBenchmarkSpec& spec, const std::filesystem::path& out_dir,
                                  bool force);

std::string spec_to_ini(const SyntheticBenchmarkSpec& spec);
SyntheticBenchmarkSpec spec_from_ini(const std::string& text);
SyntheticBenchmarkSpec load_benchmark_spec(const std::filesystem::path& bench_dir);

}  // namespace websod::synth
