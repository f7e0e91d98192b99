#pragma once

// Stand-in data in the CIFAR-100 layout for machines without the real files.
// Each fine class owns a colour and a stripe frequency; every image adds a
// random phase and pixel noise, so the classes are learnable but not trivial.

#include <cstdint>
#include <filesystem>

#include "rattn/cifar.hpp"

namespace rattn {

Cifar100Dataset make_synthetic_cifar100(std::size_t records, std::uint64_t class_seed, std::uint64_t image_seed);

/// Writes train.bin and test.bin with the official record counts into `dir`.
void write_synthetic_cifar100(const std::filesystem::path& dir, std::uint64_t seed);

}  // namespace rattn
