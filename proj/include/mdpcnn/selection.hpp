#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mdpcnn/dataset.hpp"
#include "mdpcnn/network.hpp"

namespace mdpcnn {

enum class SelectionMode { clustering, random_sample };
enum class ExtractorKind { downsample, embedding };

struct SelectionConfig {
  int top_k = 0;  // 0 means group_size
  int group_size = 3;
  SelectionMode mode = SelectionMode::clustering;
  ExtractorKind extractor = ExtractorKind::downsample;
  std::uint64_t seed = 0;  // random_sample mode only

  int effective_top_k() const { return top_k > 0 ? top_k : group_size; }

  void validate() const {
    if (group_size < 1) throw ConfigError("selection: group_size must be >= 1");
    if (effective_top_k() < group_size) {
      throw ConfigError("selection: top_k must be >= group_size");
    }
  }
};

// One d-dim feature vector per view, with object/class/view bookkeeping.
struct FeatureMatrix {
  int dim = 0;
  std::vector<std::vector<float>> rows;
  std::vector<int> object_index;  // per row
  std::vector<int> class_index;   // per row
  std::vector<int> view_index;    // per row, within the object
  int num_objects = 0;
  int num_classes = 0;
};

// The hardest views chosen for one object, in rank order.
struct ViewGroup {
  int object_index = -1;
  int class_index = -1;
  std::vector<int> view_ids;
  std::vector<double> dist2;  // squared distance to the class center
};

// downsample: block-average to (min(16,H), min(16,W)) and flatten, pixel
// values scaled to [0, 1]. embedding: the current network embedding of each
// single view (weights required).
FeatureMatrix extract_features(const Corpus& corpus, ExtractorKind kind,
                               const ModelWeights<float>* weights = nullptr);

// Per-class mean of the member feature vectors.
std::vector<std::vector<double>> class_centers(const FeatureMatrix& features);

// View ids of one object sorted by descending squared distance to the
// object's class center; ties broken by ascending view id.
std::vector<int> rank_views(const FeatureMatrix& features,
                            const std::vector<std::vector<double>>& centers,
                            int object_index);

std::vector<ViewGroup> select_groups(
    const FeatureMatrix& features,
    const std::vector<std::vector<double>>& centers,
    const SelectionConfig& config);

void write_selection_manifest(const std::filesystem::path& path,
                              const Corpus& corpus,
                              const std::vector<ViewGroup>& groups);

std::vector<ViewGroup> read_selection_manifest(
    const std::filesystem::path& path, const Corpus& corpus);

}  // namespace mdpcnn
