#pragma once

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "websod/box.hpp"
#include "websod/tensor.hpp"

namespace websod {

class IngestionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Ordered label vocabulary; class ids index into it.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> names);

  int size() const { return static_cast<int>(names_.size()); }
  const std::string& name(int id) const { return names_.at(static_cast<std::size_t>(id)); }
  std::optional<int> find(std::string_view name) const;
  const std::vector<std::string>& names() const { return names_; }

 private:
  std::vector<std::string> names_;
};

/// Base/novel partition of a vocabulary. Base classes have box supervision in the
/// target domain; novel classes only appear in web images.
class ClassSplit {
 public:
  ClassSplit(const Vocabulary& vocab, std::vector<std::string> base, std::vector<std::string> novel);

  const std::vector<std::string>& base_names() const { return base_; }
  const std::vector<std::string>& novel_names() const { return novel_; }
  const std::vector<int>& base_ids() const { return base_ids_; }
  const std::vector<int>& novel_ids() const { return novel_ids_; }
  bool is_base(int class_id) const;
  bool is_novel(int class_id) const;

 private:
  std::vector<std::string> base_, novel_;
  std::vector<int> base_ids_, novel_ids_;
};

struct TargetImageRecord {
  std::string image_id;
  Tensor image;  // 3 x H x W, values in [0,1]
  std::vector<GroundTruth> objects;
};

struct WebImageRecord {
  std::string image_id;
  Tensor image;
  int image_label = -1;
};

struct PseudoBox {
  Box box;
  int class_id;
  double score;
};

/// Estimator boxes on one web image, all relabelled with the image label.
struct PseudoAnnotation {
  std::string image_id;
  int image_label = -1;
  std::vector<PseudoBox> boxes;

  /// Throws std::logic_error if a box disagrees with the image label or falls
  /// below `threshold`.
  void validate(double threshold) const;
};

/// Parsed VOC-style annotation, boxes already in the 0-based corner convention.
struct VocAnnotation {
  std::string filename;
  int width = 0;
  int height = 0;
  std::vector<GroundTruth> objects;
  int dropped_difficult = 0;
};

/// VOC xmin/ymin are 1-based inclusive pixel indices: a VOC box (xmin..xmax)
/// becomes the continuous box [xmin-1, xmax).
VocAnnotation parse_voc_annotation(std::string_view xml_text, const Vocabulary& vocab,
                                   std::string_view source = "<memory>");
std::string write_voc_annotation(const VocAnnotation& ann, const Vocabulary& vocab);

struct WebManifestEntry {
  std::string image_id;  // file stem of the path
  std::string path;      // relative to the manifest directory
  int image_label;
};

/// One `relative/path.png<TAB>label` per line. Blank lines are skipped.
std::vector<WebManifestEntry> load_web_manifest(std::string_view manifest_text, const Vocabulary& vocab,
                                                std::string_view source = "<memory>");
std::string write_web_manifest(const std::vector<WebManifestEntry>& entries, const Vocabulary& vocab);

// Dataset directories as produced by the benchmark generator.
/// Parses <dir>/annotations/*.xml in file name order; ids are the file stems.
std::vector<std::pair<std::string, VocAnnotation>> load_annotation_dir(const std::filesystem::path& dir,
                                                                      const Vocabulary& vocab);
std::vector<TargetImageRecord> load_target_split(const std::filesystem::path& dir, const Vocabulary& vocab);
std::vector<WebImageRecord> load_web_split(const std::filesystem::path& dir, const Vocabulary& vocab);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view text);

}  // namespace websod
