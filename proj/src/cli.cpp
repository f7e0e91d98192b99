#include "rattn/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "rattn/analysis.hpp"
#include "rattn/checkpoint.hpp"
#include "rattn/config.hpp"
#include "rattn/metrics.hpp"

namespace rattn {

namespace fs = std::filesystem;

namespace {

constexpr const char* kDataEnv = "RESULT_ATTN_DATA";

struct ModelFlags {
  std::optional<int> variant;
  std::optional<std::string> mode;
  std::optional<std::size_t> r;
  std::optional<std::size_t> classes;

  void add(CLI::App* app) {
    app->add_option("--variant", variant, "ResNet depth")->check(CLI::IsMember({34, 50, 101}));
    app->add_option("--mode", mode, "se | se_a | se_r");
    app->add_option("--r", r, "excitation reduction ratio")->check(CLI::PositiveNumber);
    app->add_option("--classes", classes, "number of classes")->check(CLI::PositiveNumber);
  }

  bool any() const { return variant || mode || r || classes; }

  // A different depth or mode resets head placement to that mode's defaults;
  // the remaining model fields (dropout, width, routing style) are kept.
  void apply(RunConfig& cfg) const {
    if (!any()) return;
    ModelSpec& m = cfg.model;
    const int v = variant.value_or(m.variant);
    const ModelMode md = mode ? parse_mode(*mode) : m.mode;
    ModelSpec next = (v != m.variant || md != m.mode) ? ModelSpec::make(v, md, m.reduction_ratio, m.num_classes) : m;
    next.aux_dropout = m.aux_dropout;
    next.width = m.width;
    next.stem = m.stem;
    next.attention_input = m.attention_input;
    next.detach_aux_into_attention = m.detach_aux_into_attention;
    if (r) next.reduction_ratio = *r;
    if (classes) next.num_classes = *classes;
    if (next.aux_positions.size() != cfg.train.loss.aux.size()) cfg.train.loss = default_loss_weights(next);
    m = next;
  }
};

std::string resolve_data_root(const std::string& flag, const std::string& from_config) {
  if (!flag.empty()) return flag;
  if (!from_config.empty()) return from_config;
  if (const char* env = std::getenv(kDataEnv); env != nullptr && *env != '\0') return env;
  throw ConfigError(std::string("no dataset root: pass --data, set data.root in the config or set ") + kDataEnv);
}

void write_text(const fs::path& file, const std::string& text) {
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw IoError("cannot write " + file.string());
  out << text;
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string config, data, out, checkpoint;
  std::optional<std::uint64_t> seed;
  std::size_t max_epochs = 0;
  std::optional<std::size_t> subset;
  bool deterministic = false;
  ModelFlags model;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
  RunConfig cfg = a.config.empty() ? RunConfig::defaults() : load_config(a.config);
  a.model.apply(cfg);
  if (a.seed) cfg.seed = cfg.train.seed = *a.seed;
  if (a.subset) cfg.data.subset = *a.subset;
  if (!a.out.empty()) cfg.output_dir = a.out;
  cfg.validate();

  const fs::path root = resolve_data_root(a.data, cfg.data.root);
  const Cifar100Dataset full_train = load_cifar100(root, Split::Train);
  const Cifar100Dataset full_test = load_cifar100(root, Split::Test);
  const ChannelMeans means = cached_channel_means(root, full_train);
  const std::size_t test_n = cfg.data.test_subset > 0 ? cfg.data.test_subset : cfg.data.subset;
  const Cifar100Dataset train_set = subset(full_train, cfg.data.subset, cfg.seed);
  const Cifar100Dataset test_set = subset(full_test, test_n, mix_seed(cfg.seed, 1));
  if (cfg.model.num_classes < Cifar100Dataset::kFineClasses) {
    throw ConfigError("model.num_classes: CIFAR-100 labels need at least 100 classes, got " +
                      std::to_string(cfg.model.num_classes));
  }

  const fs::path out_dir = cfg.output_dir;
  fs::create_directories(out_dir);
  write_text(out_dir / "config.json", serialize_config(cfg));

  Model<float> model(cfg.model, mix_seed(cfg.seed, 0xA11CEULL));
  Trainer trainer(model, cfg.train, means);
  if (!a.checkpoint.empty()) {
    trainer.load_checkpoint(a.checkpoint);
    out << "resumed from " << a.checkpoint << " after epoch " << trainer.history().epochs.size() << "\n";
  }
  out << "training " << to_string(cfg.model.mode) << "-" << cfg.model.variant << " on " << train_set.size()
      << " images, testing on " << test_set.size() << "\n";

  TrainOptions opts;
  opts.out_dir = out_dir;
  opts.deterministic = a.deterministic;
  opts.max_epochs = a.max_epochs;
  opts.on_epoch = [&](const EpochRecord& r) {
    out << "epoch " << r.epoch << "  loss " << fixed(r.train_loss, 4) << "  train_err " << fixed(r.train_err, 2)
        << "  test_err " << fixed(r.test_err, 2) << "  lr " << r.lr << "\n"
        << std::flush;
  };
  const TrainingHistory h = trainer.run(train_set, test_set, opts);
  if (!h.epochs.empty()) {
    emit_overlay({{to_string(cfg.model.mode) + "-" + std::to_string(cfg.model.variant), h}}, out_dir / "metrics.svg");
    const nlohmann::json summary = {{"epochs", h.epochs.size()},
                                    {"final_accuracy", h.final_accuracy()},
                                    {"best_accuracy", h.best_accuracy()}};
    write_text(out_dir / "summary.json", summary.dump(2) + "\n");
    out << "final accuracy " << fixed(h.final_accuracy(), 2) << "%, best " << fixed(h.best_accuracy(), 2) << "%\n";
  }
  out << "wrote " << (out_dir / "metrics.csv").string() << " and " << (out_dir / "checkpoint.ckpt").string() << "\n";
  return 0;
}

// ---------------------------------------------------------------- eval / analyze

struct Loaded {
  Checkpoint ckpt;
  std::optional<Model<float>> model;
};

Loaded load_checkpoint_model(const std::string& file) {
  Loaded l;
  l.ckpt = read_checkpoint(file);
  l.model.emplace(l.ckpt.spec);
  restore_model(l.ckpt, *l.model);
  return l;
}

ChannelMeans means_for(const Checkpoint& ck, const fs::path& root) {
  if (ck.means) return *ck.means;
  return cached_channel_means(root, load_cifar100(root, Split::Train));
}

int cmd_eval(const std::string& ckpt, const std::string& data, std::size_t subset_n, std::ostream& out) {
  Loaded l = load_checkpoint_model(ckpt);
  const fs::path root = resolve_data_root(data, "");
  const Cifar100Dataset test = subset(load_cifar100(root, Split::Test), subset_n, 1);
  const double acc = evaluate(*l.model, test, means_for(l.ckpt, root));
  out << "accuracy " << fixed(acc, 2) << "% on " << test.size() << " test images (epoch " << l.ckpt.epoch << ")\n";
  return 0;
}

int cmd_analyze(const std::string& ckpt, const std::string& data, int stage, std::size_t batch, std::uint64_t seed,
                const std::string& out_dir, std::ostream& out) {
  Loaded l = load_checkpoint_model(ckpt);
  const fs::path root = resolve_data_root(data, "");
  const Cifar100Dataset test = subset(load_cifar100(root, Split::Test), batch, seed);
  std::vector<std::size_t> idx(test.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const auto series = attention_std_report(*l.model, make_batch(test, idx, means_for(l.ckpt, root)), stage);
  out << format_attention_report(series);
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    const fs::path file = fs::path(out_dir) / ("attention_stage" + std::to_string(stage) + ".csv");
    write_attention_csv(file, series);
    out << "wrote " << file.string() << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------- count

int cmd_count(const std::string& config, const ModelFlags& flags, std::size_t side, bool per_layer,
              const std::string& out_dir, std::ostream& out) {
  RunConfig cfg = config.empty() ? RunConfig::defaults() : load_config(config);
  if (config.empty() && !flags.mode) cfg.model = ModelSpec::make(cfg.model.variant, ModelMode::Se);
  cfg.train.loss = default_loss_weights(cfg.model);
  flags.apply(cfg);
  cfg.model.validate();
  const Model<float> model(cfg.model);
  const AccountingReport report = count_macs(model, {1, 3, side, side});
  out << to_string(cfg.model.mode) << "-resnet" << cfg.model.variant << "  r=" << cfg.model.reduction_ratio
      << "  classes=" << cfg.model.num_classes << "  input=(1,3," << side << "," << side << ")\n";
  out << format_report(report, per_layer);
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    const fs::path file = fs::path(out_dir) / "accounting.csv";
    write_report_csv(file, report);
    out << "wrote " << file.string() << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------- plot

int cmd_plot(const std::vector<std::string>& files, std::vector<std::string> labels, const std::string& svg,
             const std::string& title, std::ostream& out) {
  if (!labels.empty() && labels.size() != files.size()) {
    throw ConfigError("plot: " + std::to_string(labels.size()) + " labels for " + std::to_string(files.size()) +
                      " files");
  }
  std::vector<LabeledHistory> runs;
  for (std::size_t i = 0; i < files.size(); ++i) {
    const fs::path f = files[i];
    std::string label = labels.empty() ? (f.stem() == "metrics" ? f.parent_path().filename().string() : f.stem().string())
                                       : labels[i];
    runs.push_back({label, read_metrics_csv(f)});
  }
  emit_overlay(runs, svg, title);
  out << "wrote " << svg << "\n";
  return 0;
}

}  // namespace

int run_command(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Result-conditioned channel attention: train, evaluate and account SE / SE-R ResNets",
               "result_attn"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a model and write metrics.csv, checkpoint.ckpt, metrics.svg");
  train->add_option("--config", ta.config, "run configuration (JSON)");
  train->add_option("--data", ta.data, "CIFAR-100 binary directory");
  train->add_option("--out", ta.out, "output directory (overrides output.dir)");
  train->add_option("--seed", ta.seed, "run seed");
  train->add_option("--max-epochs", ta.max_epochs, "stop after this many epochs");
  train->add_option("--subset", ta.subset, "train on a seeded subset of this many images");
  train->add_option("--checkpoint", ta.checkpoint, "resume from this checkpoint");
  train->add_flag("--deterministic", ta.deterministic, "single thread; write 0 in the seconds column");
  ta.model.add(train);

  std::string eval_ckpt, eval_data;
  std::size_t eval_subset = 0;
  auto* eval = app.add_subcommand("eval", "Print top-1 accuracy of a checkpoint on the test split");
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--data", eval_data, "CIFAR-100 binary directory");
  eval->add_option("--subset", eval_subset, "evaluate on a seeded subset of this many images");

  std::string count_cfg, count_out;
  std::size_t count_side = 32;
  bool per_layer = false;
  ModelFlags count_flags;
  auto* count = app.add_subcommand("count", "Parameter and MAC accounting for a model spec");
  count->add_option("--config", count_cfg, "take the model section from this configuration");
  count->add_option("--out", count_out, "write accounting.csv into this directory");
  count->add_option("--input", count_side, "input height and width")->check(CLI::PositiveNumber);
  count->add_flag("--per-layer", per_layer, "print every layer, not just the totals");
  count_flags.add(count);

  std::string an_ckpt, an_data, an_out;
  int an_stage = 3;
  std::size_t an_batch = 128;
  std::uint64_t an_seed = 0;
  auto* analyze = app.add_subcommand("analyze-attention", "Spread of attention weights per SE unit of one stage");
  analyze->add_option("--checkpoint", an_ckpt, "checkpoint file")->required();
  analyze->add_option("--data", an_data, "CIFAR-100 binary directory");
  analyze->add_option("--stage", an_stage, "stage 1..4")->check(CLI::Range(1, 4));
  analyze->add_option("--batch", an_batch, "number of random test images")->check(CLI::PositiveNumber);
  analyze->add_option("--seed", an_seed, "seed for picking the images");
  analyze->add_option("--out", an_out, "write attention_stage<k>.csv into this directory");

  std::vector<std::string> plot_files, plot_labels;
  std::string plot_out = "curves.svg", plot_title;
  auto* plot = app.add_subcommand("plot", "Overlay the error curves of several metrics.csv files");
  plot->add_option("files", plot_files, "metrics CSV files")->required()->check(CLI::ExistingFile);
  plot->add_option("--label", plot_labels, "one label per file");
  plot->add_option("--out", plot_out, "output SVG");
  plot->add_option("--title", plot_title, "plot title");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train) return cmd_train(ta, out);
    if (*eval) return cmd_eval(eval_ckpt, eval_data, eval_subset, out);
    if (*count) return cmd_count(count_cfg, count_flags, count_side, per_layer, count_out, out);
    if (*analyze) return cmd_analyze(an_ckpt, an_data, an_stage, an_batch, an_seed, an_out, out);
    if (*plot) return cmd_plot(plot_files, plot_labels, plot_out, plot_title, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv{"result_attn"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_command(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace rattn
