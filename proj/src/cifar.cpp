#include "rattn/cifar.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "rattn/error.hpp"
#include "rattn/rng.hpp"

namespace rattn {

namespace fs = std::filesystem;

std::string to_string(Split s) { return s == Split::Train ? "train" : "test"; }

void Cifar100Dataset::push_back(std::uint8_t coarse_label, std::uint8_t fine_label, const std::uint8_t* chw) {
  coarse.push_back(coarse_label);
  fine.push_back(fine_label);
  pixels.insert(pixels.end(), chw, chw + kImageBytes);
}

std::size_t expected_records(Split s) {
  return s == Split::Train ? Cifar100Dataset::kTrainRecords : Cifar100Dataset::kTestRecords;
}

const char* split_file_name(Split s) { return s == Split::Train ? "train.bin" : "test.bin"; }

fs::path locate_split(const fs::path& root, Split s) {
  const fs::path direct = root / split_file_name(s);
  if (fs::exists(direct)) return direct;
  const fs::path nested = root / "cifar-100-binary" / split_file_name(s);
  if (fs::exists(nested)) return nested;
  return direct;
}

Cifar100Dataset parse_cifar100_file(const fs::path& file, std::size_t records) {
  std::error_code ec;
  if (!fs::is_regular_file(file, ec)) throw IngestionError("CIFAR-100 file not found: " + file.string());
  const std::uintmax_t actual = fs::file_size(file, ec);
  const std::uintmax_t expected = static_cast<std::uintmax_t>(records) * Cifar100Dataset::kRecordBytes;
  if (ec || actual != expected) {
    throw IngestionError(file.string() + ": expected " + std::to_string(expected) + " bytes (" +
                         std::to_string(records) + " records of " + std::to_string(Cifar100Dataset::kRecordBytes) +
                         "), found " + std::to_string(actual));
  }
  std::ifstream in(file, std::ios::binary);
  std::vector<std::uint8_t> raw(expected);
  if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(expected))) {
    throw IngestionError(file.string() + ": short read");
  }

  Cifar100Dataset d;
  d.coarse.resize(records);
  d.fine.resize(records);
  d.pixels.resize(records * Cifar100Dataset::kImageBytes);
  for (std::size_t i = 0; i < records; ++i) {
    const std::uint8_t* rec = raw.data() + i * Cifar100Dataset::kRecordBytes;
    if (rec[0] >= Cifar100Dataset::kCoarseClasses || rec[1] >= Cifar100Dataset::kFineClasses) {
      throw IngestionError(file.string() + ": record " + std::to_string(i) + " has labels (" +
                           std::to_string(rec[0]) + ", " + std::to_string(rec[1]) + ") outside [0,20) x [0,100)");
    }
    d.coarse[i] = rec[0];
    d.fine[i] = rec[1];
    std::copy_n(rec + 2, Cifar100Dataset::kImageBytes, d.image(i));
  }
  return d;
}

Cifar100Dataset load_cifar100(const fs::path& root, Split split) {
  return parse_cifar100_file(locate_split(root, split), expected_records(split));
}

std::array<std::uint8_t, Cifar100Dataset::kRecordBytes> serialize_record(const Cifar100Dataset& d, std::size_t i) {
  if (i >= d.size()) throw InvalidInput("record " + std::to_string(i) + " out of range");
  std::array<std::uint8_t, Cifar100Dataset::kRecordBytes> rec{};
  rec[0] = d.coarse[i];
  rec[1] = d.fine[i];
  std::copy_n(d.image(i), Cifar100Dataset::kImageBytes, rec.begin() + 2);
  return rec;
}

void write_cifar100_file(const fs::path& file, const Cifar100Dataset& d) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + file.string());
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto rec = serialize_record(d, i);
    out.write(reinterpret_cast<const char*>(rec.data()), static_cast<std::streamsize>(rec.size()));
  }
  if (!out) throw IoError("write failed: " + file.string());
}

ChannelMeans compute_channel_means(const Cifar100Dataset& d) {
  if (d.size() == 0) throw InvalidInput("channel means of an empty dataset");
  constexpr std::size_t plane = Cifar100Dataset::kSide * Cifar100Dataset::kSide;
  std::array<std::uint64_t, 3> sums{};
  for (std::size_t i = 0; i < d.size(); ++i) {
    const std::uint8_t* img = d.image(i);
    for (std::size_t c = 0; c < 3; ++c) {
      sums[c] += std::accumulate(img + c * plane, img + (c + 1) * plane, std::uint64_t{0});
    }
  }
  ChannelMeans m;
  const double count = static_cast<double>(d.size() * plane) * 255.0;
  for (std::size_t c = 0; c < 3; ++c) m.rgb[c] = static_cast<double>(sums[c]) / count;
  return m;
}

ChannelMeans cached_channel_means(const fs::path& root, const Cifar100Dataset& train) {
  const fs::path train_file = locate_split(root, Split::Train);
  const fs::path cache = train_file.parent_path() / "channel_means.json";
  std::error_code ec;
  const std::uintmax_t size = fs::exists(train_file) ? fs::file_size(train_file, ec) : 0;
  if (fs::exists(cache)) {
    try {
      std::ifstream in(cache);
      const auto j = nlohmann::json::parse(in);
      // The cache is keyed by the train file size so a replaced file is recomputed.
      if (j.at("train_bytes").get<std::uintmax_t>() == size && j.at("records").get<std::size_t>() == train.size()) {
        ChannelMeans m;
        for (std::size_t c = 0; c < 3; ++c) m.rgb[c] = j.at("mean").at(c).get<double>();
        return m;
      }
    } catch (const nlohmann::json::exception&) {
      // Unreadable cache: fall through and rebuild it.
    }
  }
  const ChannelMeans m = compute_channel_means(train);
  nlohmann::json j = {{"train_bytes", size}, {"records", train.size()}, {"mean", m.rgb}};
  const fs::path tmp = cache.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) return m;
    out << j.dump(2) << "\n";
    if (!out) return m;
  }
  fs::rename(tmp, cache, ec);
  if (ec) fs::remove(tmp, ec);
  return m;
}

Cifar100Dataset subset(const Cifar100Dataset& d, std::size_t n, std::uint64_t seed) {
  if (n == 0 || n >= d.size()) return d;
  std::vector<std::size_t> order(d.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(mix_seed(seed, 0x5B5E7ULL));
  // Partial Fisher-Yates: the first n slots end up a uniform sample.
  for (std::size_t i = 0; i < n; ++i) std::swap(order[i], order[i + rng.below(d.size() - i)]);
  order.resize(n);
  std::sort(order.begin(), order.end());
  Cifar100Dataset out;
  out.coarse.reserve(n);
  out.fine.reserve(n);
  out.pixels.reserve(n * Cifar100Dataset::kImageBytes);
  for (std::size_t i : order) out.push_back(d.coarse[i], d.fine[i], d.image(i));
  return out;
}

}  // namespace rattn
