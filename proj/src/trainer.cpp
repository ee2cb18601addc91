#include "mdpcnn/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>

#include "mdpcnn/graph.hpp"
#include "mdpcnn/rng.hpp"

namespace mdpcnn {

AblationMode parse_ablation_mode(const std::string& s) {
  if (s == "only_batch") return AblationMode::only_batch;
  if (s == "batch_plus_selection") return AblationMode::batch_plus_selection;
  if (s == "all") return AblationMode::all;
  throw ConfigError("unknown ablation mode '" + s + "'");
}

std::string ablation_mode_name(AblationMode m) {
  switch (m) {
    case AblationMode::only_batch: return "only_batch";
    case AblationMode::batch_plus_selection: return "batch_plus_selection";
    default: return "all";
  }
}

double lr_at(int epoch, const TrainConfig& config) {
  if (epoch < 0) throw UsageError("lr_at: epoch must be >= 0");
  return config.initial_lr *
         std::pow(config.lr_decay_factor, epoch / config.lr_decay_every_epochs);
}

GroupPairBatch<float> assemble_batch(std::span<const GroupPairRecord> records,
                                     const Corpus& corpus,
                                     int views_per_group) {
  const int B = static_cast<int>(records.size());
  if (B == 0) throw UsageError("assemble_batch: empty record span");
  const int H = corpus.view_h, W = corpus.view_w;

  GroupPairBatch<float> batch;
  batch.views_a = Tensor4<float>::zeros(B * views_per_group, 1, H, W);
  batch.views_b = Tensor4<float>::zeros(B * views_per_group, 1, H, W);

  auto fill_side = [&](Tensor4<float>& dst, int row, int object_index,
                       const std::vector<int>& view_ids) {
    const MultiViewObject& obj = corpus.objects.at(object_index);
    if (static_cast<int>(view_ids.size()) != views_per_group) {
      throw UsageError("assemble_batch: record has " +
                       std::to_string(view_ids.size()) + " views, expected " +
                       std::to_string(views_per_group));
    }
    for (int v = 0; v < views_per_group; ++v) {
      const int id = view_ids[v];
      if (id < 0 || id >= static_cast<int>(obj.views.size())) {
        throw IoError("assemble_batch: object " + obj.id + " has no view " +
                      std::to_string(id));
      }
      const Image& img = obj.views[id];
      float* out = dst.sample(row * views_per_group + v);
      for (std::size_t i = 0; i < img.pixels.size(); ++i) {
        out[i] = static_cast<float>(img.pixels[i]) / 255.0f;
      }
    }
  };

  for (int i = 0; i < B; ++i) {
    const GroupPairRecord& r = records[i];
    fill_side(batch.views_a, i, r.object_a, r.views_a);
    fill_side(batch.views_b, i, r.object_b, r.views_b);
    batch.labels_a.push_back(r.class_a);
    batch.labels_b.push_back(r.class_b);
    batch.pair_labels.push_back(r.label);
  }
  batch.validate(views_per_group);
  return batch;
}

TrainLog train(const Corpus& corpus, const std::vector<GroupPairRecord>& pairs,
               ModelWeights<float>& model, const TrainConfig& config) {
  config.validate();
  if (pairs.empty()) throw UsageError("train: empty pair list");
  const LossConfig loss_cfg = config.effective_loss();
  const int V = model.config.views_per_group;

  TrainLog log;
  long long iteration = 0;
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto epoch_start = std::chrono::steady_clock::now();
    const double lr = lr_at(epoch, config);
    std::mt19937_64 rng(mix_seed(config.seed, epoch));
    std::shuffle(order.begin(), order.end(), rng);

    for (std::size_t at = 0; at < order.size();
         at += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t take =
          std::min<std::size_t>(config.batch_size, order.size() - at);
      std::vector<GroupPairRecord> chunk;
      chunk.reserve(take);
      for (std::size_t i = 0; i < take; ++i) chunk.push_back(pairs[order[at + i]]);
      GroupPairBatch<float> batch = assemble_batch(chunk, corpus, V);

      Graph<float> g;
      ChainVars<float> w = register_weights(g, model);
      auto emb_a =
          forward_chain_graph(g, model.config, w, g.input(batch.views_a));
      auto emb_b =
          forward_chain_graph(g, model.config, w, g.input(batch.views_b));

      DiscriminationResult<float> loss = discrimination_loss(
          g.value(emb_a), g.value(emb_b), batch.labels_a, batch.labels_b,
          batch.pair_labels, loss_cfg, model.centers);
      if (!std::isfinite(loss.loss)) {
        throw DiagnosticError(
            "train: non-finite loss at iteration " + std::to_string(iteration) +
            " (lr " + std::to_string(lr) + ", loss " +
            std::to_string(loss.loss) + ")");
      }

      g.backward_seeded({{emb_a, loss.grad_a}, {emb_b, loss.grad_b}});

      const float flr = static_cast<float>(lr);
      auto update = [flr](Tensor4<float>& weight, const Tensor4<float>& grad) {
        for (std::size_t i = 0; i < weight.size(); ++i) {
          weight.data[i] -= flr * grad.data[i];
        }
      };
      for (int i = 0; i < 5; ++i) {
        update(model.conv_w[i], g.grad(w.conv_w[i]));
        update(model.conv_b[i], g.grad(w.conv_b[i]));
      }
      update(model.fc1_w, g.grad(w.fc1_w));
      update(model.fc1_b, g.grad(w.fc1_b));
      update(model.fc2_w, g.grad(w.fc2_w));
      update(model.fc2_b, g.grad(w.fc2_b));
      update(model.centers.centers, loss.grad_centers);

      log.entries.push_back(
          {iteration, epoch, lr, static_cast<double>(loss.loss)});
      ++iteration;
    }
    log.epoch_seconds.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                      epoch_start)
            .count());
  }
  return log;
}

void write_train_log_csv(const std::filesystem::path& path,
                         const TrainLog& log) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << "iteration,epoch,lr,loss\n";
  char buf[64];
  for (const TrainLogEntry& e : log.entries) {
    std::snprintf(buf, sizeof(buf), "%lld,%d,%.9e,%.9e\n", e.iteration,
                  e.epoch, e.lr, e.loss);
    os << buf;
  }
  if (!os) throw IoError("failed writing " + path.string());
}

}  // namespace mdpcnn
