#pragma once

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include "mdpcnn/dataset.hpp"
#include "mdpcnn/network.hpp"

namespace mdpcnn {

// One group of V views standing in for an object at retrieval time.
struct EvalGroup {
  int object_index = -1;
  int class_index = -1;
  Tensor4<float> views;  // (V, 1, H, W)
};

EvalGroup make_eval_group(const Corpus& corpus, int object_index,
                          const std::vector<int>& view_ids);

// Per-query gallery ranking by ascending embedding distance, ties by
// object index. A gallery entry matching the query object is dropped, so a
// query never appears in its own list.
struct RankedRetrieval {
  int query_object = -1;
  int query_class = -1;
  std::vector<int> gallery_objects;
  std::vector<double> distances;
  std::vector<char> relevant;
};

std::vector<RankedRetrieval> embed_and_rank(
    const ModelWeights<float>& weights, const std::vector<EvalGroup>& queries,
    const std::vector<EvalGroup>& gallery);

// One evaluation pass. Queries without a single relevant gallery item are
// excluded from FT/ST/ANMRR and counted in zero_relevant_queries; they score
// zero in the other metrics.
struct MetricValues {
  double nn = 0, ft = 0, st = 0, f = 0, dcg = 0, anmrr = 0, map = 0;
  int zero_relevant_queries = 0;
};

// Definitions (k = 10 retrieval cutoff for the F-measure):
//   NN   fraction of queries whose rank-1 item is relevant
//   FT   mean recall within the top R, R = |relevant(q)|
//   ST   mean recall within the top 2R (capped at the gallery size)
//   F    mean 2PR/(P+R) at cutoff min(10, gallery size)
//   DCG  mean of (rel_1 + sum_{i>=2} rel_i / log2(i)) / ideal
//   ANMRR  MPEG-7: K = min(4 NG, 2 GTM); ranks beyond K count 1.25 K;
//          AVR = mean rank; MRR = AVR - 0.5 - NG/2;
//          NMRR = MRR / (1.25 K - 0.5 - NG/2); averaged over queries
//   mAP  mean over queries of average precision over all relevant items
MetricValues compute_metrics(const std::vector<RankedRetrieval>& rankings,
                             int cutoff = 10);

// Interpolated precision (max precision at recall >= r) averaged across
// queries at recall levels 0.05, 0.10, ..., 1.00.
std::vector<std::pair<double, double>> pr_curve(
    const std::vector<RankedRetrieval>& rankings);

struct MetricStat {
  double mean = 0;
  double stddev = 0;
};

struct MetricReport {
  MetricStat nn, ft, st, f, dcg, anmrr, map;
  std::vector<std::pair<double, double>> pr;  // mean precision per level
  int repeats = 0;
  int zero_relevant_warnings = 0;
};

// The repeat protocol: each run draws V random views per test object to
// form its group, every object queries the gallery of all others, and the
// per-metric mean and standard deviation over runs is reported.
MetricReport repeat_protocol(const ModelWeights<float>& weights,
                             const Corpus& test_corpus, int runs,
                             std::uint64_t seed);

void write_metric_report(const std::filesystem::path& path,
                         const MetricReport& report);
void write_pr_csv(const std::filesystem::path& path,
                  const MetricReport& report);

}  // namespace mdpcnn
