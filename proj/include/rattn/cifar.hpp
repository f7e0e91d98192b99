#pragma once

// CIFAR-100 binary format. Each record is 3,074 bytes:
//   byte 0      coarse label (0..19)
//   byte 1      fine label   (0..99)
//   bytes 2..   1024 red, 1024 green, 1024 blue, each plane row-major 32x32
// train.bin holds 50,000 records, test.bin 10,000.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace rattn {

enum class Split { Train, Test };

std::string to_string(Split s);

struct Cifar100Dataset {
  static constexpr std::size_t kSide = 32;
  static constexpr std::size_t kImageBytes = 3 * kSide * kSide;
  static constexpr std::size_t kRecordBytes = kImageBytes + 2;
  static constexpr std::size_t kTrainRecords = 50000;
  static constexpr std::size_t kTestRecords = 10000;
  static constexpr std::size_t kFineClasses = 100;
  static constexpr std::size_t kCoarseClasses = 20;

  std::vector<std::uint8_t> pixels;  // records' image bytes back to back, CHW
  std::vector<std::uint8_t> coarse;
  std::vector<std::uint8_t> fine;

  std::size_t size() const { return fine.size(); }
  const std::uint8_t* image(std::size_t i) const { return pixels.data() + i * kImageBytes; }
  std::uint8_t* image(std::size_t i) { return pixels.data() + i * kImageBytes; }

  void push_back(std::uint8_t coarse_label, std::uint8_t fine_label, const std::uint8_t* chw);
};

std::size_t expected_records(Split s);
const char* split_file_name(Split s);

/// Accepts either the directory holding train.bin/test.bin or its parent with
/// a cifar-100-binary/ subdirectory.
std::filesystem::path locate_split(const std::filesystem::path& root, Split s);

/// Parses a whole split. Throws IngestionError on a missing file, a size that
/// is not exactly records * 3,074 bytes, or an out-of-range label.
Cifar100Dataset load_cifar100(const std::filesystem::path& root, Split split);

/// Parses one binary file with an explicit expected record count.
Cifar100Dataset parse_cifar100_file(const std::filesystem::path& file, std::size_t records);

std::array<std::uint8_t, Cifar100Dataset::kRecordBytes> serialize_record(const Cifar100Dataset& d, std::size_t i);

void write_cifar100_file(const std::filesystem::path& file, const Cifar100Dataset& d);

/// Per-channel means of a split on the [0, 1] pixel scale.
struct ChannelMeans {
  std::array<double, 3> rgb{};
  bool operator==(const ChannelMeans&) const = default;
};

/// CIFAR-100 train-split means as usually quoted for the official data.
inline constexpr std::array<double, 3> kCifar100Means{0.5071, 0.4865, 0.4409};

ChannelMeans compute_channel_means(const Cifar100Dataset& d);

/// Means of the train split, read from channel_means.json beside train.bin
/// when present, otherwise computed and written there. A read-only data
/// directory only skips the cache.
ChannelMeans cached_channel_means(const std::filesystem::path& root, const Cifar100Dataset& train);

/// `n` records chosen by a seeded shuffle, kept in ascending index order.
/// n == 0 or n >= size returns a copy.
Cifar100Dataset subset(const Cifar100Dataset& d, std::size_t n, std::uint64_t seed);

}  // namespace rattn
