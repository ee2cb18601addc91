// Command-line front end: replayable pipeline stages with file handoffs.
//
//   synth     write a synthetic multi-view corpus
//   select    hard-view selection manifest from a corpus
//   pairgen   pair manifest from a selection manifest (prints pair space)
//   train     SGD training from a pair manifest; writes weights + loss CSV
//   eval      retrieval metrics on the test split; writes report + PR CSV
//   gradcheck finite-difference verification of the gradient path

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mdpcnn/config.hpp"
#include "mdpcnn/dataset.hpp"
#include "mdpcnn/eval.hpp"
#include "mdpcnn/gradcheck.hpp"
#include "mdpcnn/graph.hpp"
#include "mdpcnn/network.hpp"
#include "mdpcnn/pairgen.hpp"
#include "mdpcnn/rng.hpp"
#include "mdpcnn/selection.hpp"
#include "mdpcnn/trainer.hpp"

namespace fs = std::filesystem;
using namespace mdpcnn;

namespace {

struct GlobalArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;
  long long seed = -1;
};

RunConfig resolve_config(const GlobalArgs& args) {
  RunConfig cfg;
  if (!args.config_path.empty()) {
    cfg = RunConfig::from_file(args.config_path);
  }
  for (const std::string& kv : args.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("--set expects key=value, got '" + kv + "'");
    }
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (args.seed >= 0) cfg.seed = static_cast<std::uint64_t>(args.seed);
  if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
  if (cfg.out_dir.empty()) cfg.out_dir = ".";
  return cfg;
}

fs::path prepare_out_dir(const RunConfig& cfg) {
  fs::path out(cfg.out_dir);
  fs::create_directories(out);
  cfg.write(out / "run_config.txt");
  return out;
}

int cmd_synth(const RunConfig& cfg) {
  if (cfg.corpus_dir.empty()) {
    throw ConfigError("synth: paths.corpus must name the output directory");
  }
  synth_generate(cfg.synth, stage_seed(cfg.seed, "synth"), cfg.corpus_dir);
  RunConfig resolved = cfg;
  resolved.write(fs::path(cfg.corpus_dir) / "run_config.txt");
  std::printf("synth: wrote %d classes x %d objects x %d views under %s\n",
              cfg.synth.num_classes, cfg.synth.objects_per_class,
              cfg.synth.views_per_object, cfg.corpus_dir.c_str());
  return 0;
}

int cmd_select(const RunConfig& cfg) {
  const fs::path out = prepare_out_dir(cfg);
  Corpus corpus = load_corpus(cfg.corpus_dir);
  auto [train_corpus, test_corpus] = split(corpus, cfg.split);

  SelectionConfig sel = cfg.resolved_selection(stage_seed(cfg.seed, "select"));
  ModelWeights<float> weights;
  const ModelWeights<float>* weights_ptr = nullptr;
  if (sel.extractor == ExtractorKind::embedding) {
    if (cfg.weights_path.empty()) {
      throw ConfigError("select: embedding extractor needs paths.weights");
    }
    NetworkConfig net =
        cfg.resolved_network(static_cast<int>(corpus.classes.size()));
    weights = load_weights<float>(cfg.weights_path, net);
    weights_ptr = &weights;
  }

  FeatureMatrix features =
      extract_features(train_corpus, sel.extractor, weights_ptr);
  auto centers = class_centers(features);
  auto groups = select_groups(features, centers, sel);
  write_selection_manifest(out / "selection_manifest.txt", train_corpus,
                           groups);
  std::printf("select: wrote %zu groups to %s\n", groups.size(),
              (out / "selection_manifest.txt").c_str());
  return 0;
}

int cmd_pairgen(const RunConfig& cfg) {
  const fs::path out = prepare_out_dir(cfg);
  Corpus corpus = load_corpus(cfg.corpus_dir);
  auto [train_corpus, test_corpus] = split(corpus, cfg.split);
  auto groups = read_selection_manifest(out / "selection_manifest.txt",
                                        train_corpus);

  // Total pair space for this training corpus (uniform view counts).
  std::size_t views = train_corpus.objects.front().views.size();
  bool uniform = true;
  for (const auto& obj : train_corpus.objects) {
    uniform = uniform && obj.views.size() == views;
  }
  if (uniform) {
    const std::uint64_t space = pair_space_size(
        static_cast<long long>(train_corpus.objects.size()),
        static_cast<long long>(views), cfg.network.views_per_group);
    std::printf("pairgen: total pair space = %llu\n",
                static_cast<unsigned long long>(space));
  } else {
    std::printf("pairgen: total pair space = n/a (non-uniform view counts)\n");
  }

  PairQuota quota = cfg.pairgen;
  quota.seed = stage_seed(cfg.seed, "pairgen");
  auto records = generate_pairs(groups, quota);
  write_pair_manifest(out / "pair_manifest.csv", quota, train_corpus, records);
  std::printf("pairgen: wrote %zu pairs to %s\n", records.size(),
              (out / "pair_manifest.csv").c_str());
  return 0;
}

int cmd_train(const RunConfig& cfg) {
  const fs::path out = prepare_out_dir(cfg);
  Corpus corpus = load_corpus(cfg.corpus_dir);
  auto [train_corpus, test_corpus] = split(corpus, cfg.split);
  auto records =
      read_pair_manifest(out / "pair_manifest.csv", train_corpus);

  NetworkConfig net =
      cfg.resolved_network(static_cast<int>(corpus.classes.size()));
  ModelWeights<float> model =
      build<float>(net, stage_seed(cfg.seed, "init"));
  TrainConfig tc = cfg.resolved_trainer();
  TrainLog log = train(train_corpus, records, model, tc);

  const fs::path weights_path = cfg.weights_path.empty()
                                    ? out / "weights.mdpw"
                                    : fs::path(cfg.weights_path);
  save_weights(model, weights_path);
  write_train_log_csv(out / "train_log.csv", log);
  double total = 0;
  for (double s : log.epoch_seconds) total += s;
  std::printf("train: %zu iterations over %d epochs in %.1fs, weights at %s\n",
              log.entries.size(), tc.epochs, total, weights_path.c_str());
  return 0;
}

int cmd_eval(const RunConfig& cfg) {
  const fs::path out = prepare_out_dir(cfg);
  Corpus corpus = load_corpus(cfg.corpus_dir);
  auto [train_corpus, test_corpus] = split(corpus, cfg.split);

  NetworkConfig net =
      cfg.resolved_network(static_cast<int>(corpus.classes.size()));
  const fs::path weights_path = cfg.weights_path.empty()
                                    ? out / "weights.mdpw"
                                    : fs::path(cfg.weights_path);
  ModelWeights<float> model = load_weights<float>(weights_path, net);

  MetricReport report = repeat_protocol(model, test_corpus, cfg.eval_repeats,
                                        stage_seed(cfg.seed, "eval"));
  write_metric_report(out / "metrics.txt", report);
  write_pr_csv(out / "pr_curve.csv", report);
  std::printf(
      "eval: repeats=%d nn=%.4f ft=%.4f st=%.4f f=%.4f dcg=%.4f anmrr=%.4f "
      "map=%.4f\n",
      report.repeats, report.nn.mean, report.ft.mean, report.st.mean,
      report.f.mean, report.dcg.mean, report.anmrr.mean, report.map.mean);
  return 0;
}

int cmd_gradcheck(const RunConfig& cfg) {
  // Compact double-precision probe of the full loss graph.
  NetworkConfig net;
  net.conv_channels = {2, 3, 4, 5, 6};
  net.input_h = net.input_w = 32;
  net.views_per_group = 3;
  net.fc1_width = 8;
  net.embedding_dim = 4;
  net.num_classes = 3;

  LossConfig loss_cfg;
  loss_cfg.num_classes = 3;

  std::mt19937_64 rng(stage_seed(cfg.seed, "gradcheck"));
  std::normal_distribution<double> dist(0.0, 1.0);
  const int B = 2, V = net.views_per_group;
  Tensor4<double> views_a(Shape4{B * V, 1, net.input_h, net.input_w});
  Tensor4<double> views_b(views_a.shape);
  for (auto& v : views_a.data) v = 0.5 + 0.25 * dist(rng);
  for (auto& v : views_b.data) v = 0.5 + 0.25 * dist(rng);
  const std::vector<int> labels_a{0, 1}, labels_b{0, 2};
  const std::vector<int> pair_labels{1, 0};

  ModelWeights<double> model = build<double>(net, cfg.seed + 1);
  for (auto& c : model.centers.centers.data) c = 0.3 * dist(rng);

  std::vector<Tensor4<double>*> params;
  for (auto& [name, tensor] : model.named_tensors()) params.push_back(tensor);

  auto eval_loss = [&]() {
    GroupPairBatch<double> batch{views_a, views_b, labels_a, labels_b,
                                 pair_labels};
    auto [ea, eb] = forward_pair(model, batch);
    return static_cast<double>(
        discrimination_loss(ea, eb, labels_a, labels_b, pair_labels, loss_cfg,
                            model.centers)
            .loss);
  };
  auto analytic = [&]() {
    Graph<double> g;
    ChainVars<double> w = register_weights(g, model);
    auto ea = forward_chain_graph(g, net, w, g.input(views_a));
    auto eb = forward_chain_graph(g, net, w, g.input(views_b));
    auto result =
        discrimination_loss(g.value(ea), g.value(eb), labels_a, labels_b,
                            pair_labels, loss_cfg, model.centers);
    g.backward_seeded({{ea, result.grad_a}, {eb, result.grad_b}});
    std::vector<Tensor4<double>> grads;
    for (int i = 0; i < 5; ++i) {
      grads.push_back(g.grad(w.conv_w[i]));
      grads.push_back(g.grad(w.conv_b[i]));
    }
    grads.push_back(g.grad(w.fc1_w));
    grads.push_back(g.grad(w.fc1_b));
    grads.push_back(g.grad(w.fc2_w));
    grads.push_back(g.grad(w.fc2_b));
    grads.push_back(result.grad_centers);
    return grads;
  };

  const double err = grad_check(eval_loss, analytic, params, 1e-5,
                                /*max_coords_per_tensor=*/40,
                                stage_seed(cfg.seed, "gradcheck-coords"));
  const double threshold = 1e-4;
  std::printf("gradcheck: max relative error %.3e (threshold %.0e)\n", err,
              threshold);
  return err <= threshold ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MDPCNN multi-view retrieval pipeline"};
  app.require_subcommand(1);

  GlobalArgs args;
  app.add_option("--config", args.config_path, "run configuration file");
  app.add_option("--set", args.overrides, "override: key=value (repeatable)");
  app.add_option("--seed", args.seed, "run seed");
  app.add_option("--out", args.out_dir, "output directory");

  auto* synth = app.add_subcommand("synth", "generate a synthetic corpus");
  auto* select = app.add_subcommand("select", "hard-view selection");
  auto* pg = app.add_subcommand("pairgen", "pairwise sample generation");
  auto* tr = app.add_subcommand("train", "train the network");
  auto* ev = app.add_subcommand("eval", "retrieval evaluation");
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check");

  CLI11_PARSE(app, argc, argv);

  try {
    const RunConfig cfg = resolve_config(args);
    if (synth->parsed()) return cmd_synth(cfg);
    if (select->parsed()) return cmd_select(cfg);
    if (pg->parsed()) return cmd_pairgen(cfg);
    if (tr->parsed()) return cmd_train(cfg);
    if (ev->parsed()) return cmd_eval(cfg);
    if (gc->parsed()) return cmd_gradcheck(cfg);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
