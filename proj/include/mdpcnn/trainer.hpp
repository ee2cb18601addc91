#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mdpcnn/losses.hpp"
#include "mdpcnn/network.hpp"
#include "mdpcnn/pairgen.hpp"
#include "mdpcnn/selection.hpp"

namespace mdpcnn {

enum class AblationMode { only_batch, batch_plus_selection, all };

AblationMode parse_ablation_mode(const std::string& s);
std::string ablation_mode_name(AblationMode m);

struct TrainConfig {
  double initial_lr = 0.05;
  double lr_decay_factor = 0.5;
  int lr_decay_every_epochs = 3;
  int epochs = 1;
  int batch_size = 12;
  LossConfig loss;
  AblationMode ablation_mode = AblationMode::all;
  std::uint64_t seed = 0;

  void validate() const {
    if (initial_lr < 0) throw ConfigError("trainer: lr must be >= 0");
    if (lr_decay_factor <= 0 || lr_decay_factor > 1) {
      throw ConfigError("trainer: lr decay factor must be in (0, 1]");
    }
    if (lr_decay_every_epochs < 1) {
      throw ConfigError("trainer: lr decay interval must be >= 1");
    }
    if (epochs < 0) throw ConfigError("trainer: epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("trainer: batch size must be >= 1");
  }

  // Ablation overrides: the two contrastive-only modes force alpha = 1,
  // beta = 0; "all" keeps the configured weights.
  LossConfig effective_loss() const {
    LossConfig l = loss;
    if (ablation_mode != AblationMode::all) {
      l.alpha = 1.0;
      l.beta = 0.0;
    }
    return l;
  }

  SelectionMode selection_mode() const {
    return ablation_mode == AblationMode::only_batch
               ? SelectionMode::random_sample
               : SelectionMode::clustering;
  }
};

struct TrainLogEntry {
  long long iteration = 0;
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct TrainLog {
  std::vector<TrainLogEntry> entries;
  std::vector<double> epoch_seconds;
};

// initial_lr * decay^floor(epoch / every).
double lr_at(int epoch, const TrainConfig& config);

// Views stacked group-contiguously along N per chain; labels aligned.
GroupPairBatch<float> assemble_batch(std::span<const GroupPairRecord> records,
                                     const Corpus& corpus,
                                     int views_per_group);

// Plain SGD over the pair list: w <- w - lr * grad for every weight tensor
// including the center bank. The pair list is reshuffled each epoch from the
// run seed; the short final batch is processed, not dropped.
TrainLog train(const Corpus& corpus,
               const std::vector<GroupPairRecord>& pairs,
               ModelWeights<float>& model, const TrainConfig& config);

void write_train_log_csv(const std::filesystem::path& path,
                         const TrainLog& log);

}  // namespace mdpcnn
