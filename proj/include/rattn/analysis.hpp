#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "rattn/model.hpp"
#include "rattn/training.hpp"

namespace rattn {

// ---------------------------------------------------------------- accounting
//
// MACs follow the thop defaults: convolution k*k*C_in*C_out*H_out*W_out,
// linear in*out per sample; batch norm, activations, pooling and additions
// count as zero. Bias terms add no MACs.

struct AccountingReport {
  std::vector<LayerCost> rows;
  std::uint64_t total_params = 0;
  std::uint64_t total_macs = 0;
};

AccountingReport make_report(std::vector<LayerCost> rows);

template <typename T>
AccountingReport count_params(const Model<T>& model);

/// `nchw` is the input shape in the usual (batch, channels, height, width) order.
template <typename T>
AccountingReport count_macs(const Model<T>& model, const std::array<std::size_t, 4>& nchw);

/// Text table: one row per layer, then totals in raw counts and millions/giga.
std::string format_report(const AccountingReport& r, bool per_layer = true);
/// CSV `layer,kind,params,macs` plus a final `total` row.
void write_report_csv(const std::filesystem::path& file, const AccountingReport& r);

// ---------------------------------------------------------------- attention spread

/// Mean over the batch of the population standard deviation of s across channels.
/// `s` is (n, 1, 1, C).
template <typename T>
double mean_channel_std(const Tensor<T>& s);

struct AttentionStdSeries {
  int stage = 0;
  std::size_t batch = 0;
  std::vector<std::string> modules;
  std::vector<double> mean_std;
  std::size_t min_index = 0;
  std::size_t max_index = 0;
};

/// Runs one evaluation forward on `batch` and summarizes the attention weights
/// of every SE unit in `stage` (1..4).
AttentionStdSeries attention_std_report(Model<float>& model, const FeatureMap<float>& batch, int stage);

/// CSV `module,mean_std`. The text form also marks the min and max modules.
void write_attention_csv(const std::filesystem::path& file, const AttentionStdSeries& s);
std::string format_attention_report(const AttentionStdSeries& s);

// ---------------------------------------------------------------- curves

struct LabeledHistory {
  std::string label;
  TrainingHistory history;
};

/// SVG line chart of train and test error against epoch for every history.
/// Test error is drawn solid, train error dashed, one colour per history.
std::string render_error_plot(const std::vector<LabeledHistory>& runs, const std::string& title = "");

/// Writes `<stem>.csv` and `<stem>.svg`. Throws IoError when unwritable.
void emit_curves(const TrainingHistory& history, const std::filesystem::path& stem, const std::string& label = "run");

/// One overlaid plot of several runs.
void emit_overlay(const std::vector<LabeledHistory>& runs, const std::filesystem::path& svg_file,
                  const std::string& title = "");

}  // namespace rattn
