#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "mdpcnn/dataset.hpp"
#include "mdpcnn/losses.hpp"
#include "mdpcnn/network.hpp"
#include "mdpcnn/pairgen.hpp"
#include "mdpcnn/selection.hpp"
#include "mdpcnn/trainer.hpp"

namespace mdpcnn {

// Everything one experiment needs, serializable as line-oriented
// `key = value` text. Every run writes its resolved config next to its
// outputs for replay.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string corpus_dir;
  std::string out_dir;
  std::string weights_path;

  NetworkConfig network;
  LossConfig loss;
  SelectionConfig selection;
  PairQuota pairgen;
  TrainConfig trainer;
  SplitSpec split;
  SynthSpec synth;
  int eval_repeats = 10;

  // Throws ConfigError on unknown keys or unparseable values.
  void set(const std::string& key, const std::string& value);

  std::string serialize() const;

  static RunConfig from_file(const std::filesystem::path& path);
  void write(const std::filesystem::path& path) const;

  // Cross-field resolution used by the pipeline stages: the trainer batch
  // size and loss settings flow into the network config, selection group
  // size follows views_per_group.
  NetworkConfig resolved_network(int corpus_classes) const;
  SelectionConfig resolved_selection(std::uint64_t stage_seed) const;
  TrainConfig resolved_trainer() const;
};

}  // namespace mdpcnn
