#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "mdpcnn/dataset.hpp"
#include "mdpcnn/selection.hpp"

namespace mdpcnn {

struct PairQuota {
  long long num_positive = 0;
  long long num_negative = 0;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_positive < 0 || num_negative < 0) {
      throw ConfigError("pairgen: quotas must be >= 0");
    }
  }
};

// One labeled pair of view groups. Stores view ids, not pixels.
struct GroupPairRecord {
  int object_a = -1;
  int object_b = -1;
  int class_a = -1;
  int class_b = -1;
  std::vector<int> views_a;
  std::vector<int> views_b;
  int label = 0;  // 1 iff class_a == class_b
};

inline int pair_label(int class_a, int class_b) {
  return class_a == class_b ? 1 : 0;
}

// C(views_per_object, group_size) * C(num_objects, 2), exact. Throws on
// 64-bit overflow.
std::uint64_t pair_space_size(long long num_objects,
                              long long views_per_object,
                              long long group_size);

// Exactly num_positive positives and num_negative negatives, drawn uniformly
// without replacement over object pairs until the pool is exhausted, then
// with replacement. Seeded and reproducible.
std::vector<GroupPairRecord> generate_pairs(const std::vector<ViewGroup>& groups,
                                            const PairQuota& quota);

void write_pair_manifest(const std::filesystem::path& path,
                         const PairQuota& quota, const Corpus& corpus,
                         const std::vector<GroupPairRecord>& records);

std::vector<GroupPairRecord> read_pair_manifest(
    const std::filesystem::path& path, const Corpus& corpus);

}  // namespace mdpcnn
