#pragma once

// Metrics CSV: header `epoch,train_loss,train_err,test_err,lr,seconds`, one row
// per completed epoch. Reals are written in shortest round-trip form, so
// reading a file back reproduces the history exactly.

#include <filesystem>
#include <string>

#include "rattn/training.hpp"

namespace rattn {

inline constexpr const char* kMetricsHeader = "epoch,train_loss,train_err,test_err,lr,seconds";

std::string format_metrics_row(const EpochRecord& r);
EpochRecord parse_metrics_row(const std::string& line);

/// Overwrites `file` with the header and every record.
void write_metrics_csv(const std::filesystem::path& file, const TrainingHistory& h);
void append_metrics_row(const std::filesystem::path& file, const EpochRecord& r);

/// Throws IoError on a missing file and InvalidInput on a malformed line.
TrainingHistory read_metrics_csv(const std::filesystem::path& file);

}  // namespace rattn
