#include "mdpcnn/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace mdpcnn {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

long long to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long out = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': not an integer: '" + v + "'");
  }
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': not a number: '" + v + "'");
  }
}

std::string fmt_double(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  if (key == "seed") {
    seed = static_cast<std::uint64_t>(to_int(key, v));
  } else if (key == "paths.corpus") {
    corpus_dir = v;
  } else if (key == "paths.out") {
    out_dir = v;
  } else if (key == "paths.weights") {
    weights_path = v;
  } else if (key == "network.conv_channels") {
    std::istringstream ss(v);
    std::string tok;
    std::vector<int> ch;
    while (std::getline(ss, tok, ',')) {
      ch.push_back(static_cast<int>(to_int(key, trim(tok))));
    }
    if (ch.size() != 5) {
      throw ConfigError("network.conv_channels needs exactly 5 entries, got " +
                        std::to_string(ch.size()));
    }
    for (int i = 0; i < 5; ++i) network.conv_channels[i] = ch[i];
  } else if (key == "network.input_h") {
    network.input_h = static_cast<int>(to_int(key, v));
  } else if (key == "network.input_w") {
    network.input_w = static_cast<int>(to_int(key, v));
  } else if (key == "network.input_channels") {
    network.input_channels = static_cast<int>(to_int(key, v));
  } else if (key == "network.views_per_group") {
    network.views_per_group = static_cast<int>(to_int(key, v));
  } else if (key == "network.fc1_width") {
    network.fc1_width = static_cast<int>(to_int(key, v));
  } else if (key == "network.embedding_dim") {
    network.embedding_dim = static_cast<int>(to_int(key, v));
  } else if (key == "loss.alpha") {
    loss.alpha = to_double(key, v);
  } else if (key == "loss.beta") {
    loss.beta = to_double(key, v);
  } else if (key == "loss.margin") {
    loss.margin = to_double(key, v);
  } else if (key == "loss.delta") {
    loss.delta = to_double(key, v);
  } else if (key == "loss.num_classes") {
    loss.num_classes = static_cast<int>(to_int(key, v));
  } else if (key == "selection.top_k") {
    selection.top_k = static_cast<int>(to_int(key, v));
  } else if (key == "selection.mode") {
    if (v == "clustering") {
      selection.mode = SelectionMode::clustering;
    } else if (v == "random") {
      selection.mode = SelectionMode::random_sample;
    } else {
      throw ConfigError("selection.mode must be 'clustering' or 'random'");
    }
  } else if (key == "selection.extractor") {
    if (v == "downsample") {
      selection.extractor = ExtractorKind::downsample;
    } else if (v == "embedding") {
      selection.extractor = ExtractorKind::embedding;
    } else {
      throw ConfigError(
          "selection.extractor must be 'downsample' or 'embedding'");
    }
  } else if (key == "pairgen.num_positive") {
    pairgen.num_positive = to_int(key, v);
  } else if (key == "pairgen.num_negative") {
    pairgen.num_negative = to_int(key, v);
  } else if (key == "trainer.lr") {
    trainer.initial_lr = to_double(key, v);
  } else if (key == "trainer.lr_decay_factor") {
    trainer.lr_decay_factor = to_double(key, v);
  } else if (key == "trainer.lr_decay_every_epochs") {
    trainer.lr_decay_every_epochs = static_cast<int>(to_int(key, v));
  } else if (key == "trainer.epochs") {
    trainer.epochs = static_cast<int>(to_int(key, v));
  } else if (key == "trainer.batch_size") {
    trainer.batch_size = static_cast<int>(to_int(key, v));
  } else if (key == "trainer.ablation_mode") {
    trainer.ablation_mode = parse_ablation_mode(v);
  } else if (key == "dataset.train_fraction") {
    split.train_fraction = to_double(key, v);
  } else if (key == "synth.num_classes") {
    synth.num_classes = static_cast<int>(to_int(key, v));
  } else if (key == "synth.objects_per_class") {
    synth.objects_per_class = static_cast<int>(to_int(key, v));
  } else if (key == "synth.views_per_object") {
    synth.views_per_object = static_cast<int>(to_int(key, v));
  } else if (key == "synth.image_size") {
    synth.image_size = static_cast<int>(to_int(key, v));
  } else if (key == "eval.repeats") {
    eval_repeats = static_cast<int>(to_int(key, v));
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

std::string RunConfig::serialize() const {
  std::ostringstream os;
  os << "seed = " << seed << "\n";
  os << "paths.corpus = " << corpus_dir << "\n";
  os << "paths.out = " << out_dir << "\n";
  os << "paths.weights = " << weights_path << "\n";
  os << "network.conv_channels = ";
  for (int i = 0; i < 5; ++i) {
    os << (i ? "," : "") << network.conv_channels[i];
  }
  os << "\n";
  os << "network.input_h = " << network.input_h << "\n";
  os << "network.input_w = " << network.input_w << "\n";
  os << "network.input_channels = " << network.input_channels << "\n";
  os << "network.views_per_group = " << network.views_per_group << "\n";
  os << "network.fc1_width = " << network.fc1_width << "\n";
  os << "network.embedding_dim = " << network.embedding_dim << "\n";
  os << "loss.alpha = " << fmt_double(loss.alpha) << "\n";
  os << "loss.beta = " << fmt_double(loss.beta) << "\n";
  os << "loss.margin = " << fmt_double(loss.margin) << "\n";
  os << "loss.delta = " << fmt_double(loss.delta) << "\n";
  os << "loss.num_classes = " << loss.num_classes << "\n";
  os << "selection.top_k = " << selection.top_k << "\n";
  os << "selection.mode = "
     << (selection.mode == SelectionMode::clustering ? "clustering" : "random")
     << "\n";
  os << "selection.extractor = "
     << (selection.extractor == ExtractorKind::downsample ? "downsample"
                                                          : "embedding")
     << "\n";
  os << "pairgen.num_positive = " << pairgen.num_positive << "\n";
  os << "pairgen.num_negative = " << pairgen.num_negative << "\n";
  os << "trainer.lr = " << fmt_double(trainer.initial_lr) << "\n";
  os << "trainer.lr_decay_factor = " << fmt_double(trainer.lr_decay_factor)
     << "\n";
  os << "trainer.lr_decay_every_epochs = " << trainer.lr_decay_every_epochs
     << "\n";
  os << "trainer.epochs = " << trainer.epochs << "\n";
  os << "trainer.batch_size = " << trainer.batch_size << "\n";
  os << "trainer.ablation_mode = " << ablation_mode_name(trainer.ablation_mode)
     << "\n";
  os << "dataset.train_fraction = " << fmt_double(split.train_fraction) << "\n";
  os << "synth.num_classes = " << synth.num_classes << "\n";
  os << "synth.objects_per_class = " << synth.objects_per_class << "\n";
  os << "synth.views_per_object = " << synth.views_per_object << "\n";
  os << "synth.image_size = " << synth.image_size << "\n";
  os << "eval.repeats = " << eval_repeats << "\n";
  return os.str();
}

RunConfig RunConfig::from_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config file " + path.string());
  RunConfig cfg;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(line_no) +
                        ": expected 'key = value'");
    }
    cfg.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  return cfg;
}

void RunConfig::write(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << serialize();
  if (!os) throw IoError("failed writing " + path.string());
}

NetworkConfig RunConfig::resolved_network(int corpus_classes) const {
  NetworkConfig n = network;
  n.batch_size = trainer.batch_size;
  n.num_classes = loss.num_classes > 0 ? loss.num_classes : corpus_classes;
  return n;
}

SelectionConfig RunConfig::resolved_selection(std::uint64_t stage_seed) const {
  SelectionConfig s = selection;
  s.group_size = network.views_per_group;
  s.mode = trainer.selection_mode() == SelectionMode::random_sample
               ? SelectionMode::random_sample
               : s.mode;
  s.seed = stage_seed;
  return s;
}

TrainConfig RunConfig::resolved_trainer() const {
  TrainConfig t = trainer;
  t.loss = loss;
  t.seed = seed;
  return t;
}

}  // namespace mdpcnn
