#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fcam/data_model.hpp"
#include "fcam/evaluation.hpp"

namespace fcam {

enum class Split { train, val, test };

std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct SampleRecord {
  std::string id;
  ImageTensor image;
  int label = 0;
  std::vector<BoundingBox> gt_boxes;
  std::optional<BinaryMask> gt_mask;
  Split split = Split::train;
};

/// One annotation line: id \t image path \t label \t boxes \t mask path.
/// Boxes are "x0 y0 x1 y1" groups joined by ';'; a missing mask is "-".
struct AnnotationEntry {
  std::string id;
  std::string image_path;
  int label = 0;
  std::vector<BoundingBox> boxes;
  std::string mask_path;  // empty when absent
};

struct DatasetManifest {
  std::filesystem::path root;
  std::vector<std::string> class_names;
  std::map<Split, std::vector<AnnotationEntry>> splits;

  std::size_t size(Split s) const;
  nlohmann::json to_json() const;
};

class DatasetError : public std::runtime_error {
 public:
  DatasetError(const std::string& record_id, const std::string& what)
      : std::runtime_error(record_id.empty() ? what : "record '" + record_id + "': " + what), id_(record_id) {}
  const std::string& record_id() const { return id_; }

 private:
  std::string id_;
};

std::string format_annotation(const AnnotationEntry& e);
AnnotationEntry parse_annotation(const std::string& line);

/// Reads <root>/manifest.json and the split annotation files it lists.
DatasetManifest read_manifest(const std::filesystem::path& root);
void write_manifest(const DatasetManifest& manifest);

/// Lazy record access over a manifest; images and masks load on demand.
class FolderDataset {
 public:
  explicit FolderDataset(DatasetManifest manifest);
  static FolderDataset open(const std::filesystem::path& root);

  const DatasetManifest& manifest() const { return manifest_; }
  std::size_t size(Split s) const { return manifest_.size(s); }
  int num_classes() const { return static_cast<int>(manifest_.class_names.size()); }
  SampleRecord load(Split s, std::size_t index) const;
  std::vector<SampleRecord> load_all(Split s) const;

 private:
  DatasetManifest manifest_;
};

struct SyntheticOptions {
  int num_classes = 3;
  int train_per_class = 100;
  int val_per_class = 20;
  int test_per_class = 20;
  int image_size = 64;
  std::uint64_t seed = 0;
  double min_area = 0.05;
  double max_area = 0.40;
};

inline const std::vector<std::string> kShapeNames{"disk", "square", "triangle"};
inline const std::vector<std::string> kColorNames{"red", "green", "blue", "yellow"};

/// (shape, color) of class k; classes enumerate distinct pairs.
std::pair<int, int> synthetic_class(int k);
std::string synthetic_class_name(int k);

/// Renders one sample in memory.
SampleRecord render_synthetic_sample(int label, int image_size, double min_area, double max_area, std::uint64_t seed);

/// Writes images/masks as rasters plus annotation files and manifest.json
/// under root; deterministic under the seed.
DatasetManifest generate_synthetic(const SyntheticOptions& opts, const std::filesystem::path& root);

}  // namespace fcam
