#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "kda/tensor.hpp"

namespace kda {

enum class Split { kTrain, kTest };

/// Raised for unreadable or malformed input data (CLI exit code 2).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Dataset {
  std::string name;
  Split split = Split::kTrain;
  std::size_t class_count = 10;
  std::vector<ImageTensor> images;
  std::vector<int> labels;

  std::size_t size() const noexcept { return images.size(); }
  bool empty() const noexcept { return images.empty(); }
  /// N x C x H x W tensor of all images.
  Tensor batch() const;
  /// First n records (n clipped to size()).
  Dataset head(std::size_t n) const;
  void validate() const;
};

struct DatasetPair {
  Dataset train;
  Dataset test;
};

inline constexpr std::size_t kCifarRecordBytes = 1 + 3 * 32 * 32;

/// Reads CIFAR-10 binary batches (data_batch_1..5.bin, test_batch.bin) from
/// `dir` or `dir/cifar-10-batches-bin`, keeping the first records in file order.
DatasetPair load_cifar10(const std::filesystem::path& dir, std::size_t train_count, std::size_t test_count);
/// Parses one batch file; `limit` caps the number of records read.
Dataset read_cifar10_file(const std::filesystem::path& file, std::size_t limit, Split split);

std::array<std::uint8_t, kCifarRecordBytes> encode_cifar_record(const ImageTensor& image, int label);
ImageTensor decode_cifar_record(const std::uint8_t* record, int* label);

/// Ten classes of synthetic 32x32 colour images with keyed colours and
/// noise: four flat figures at random positions, and six centred squares told
/// apart only by which half carries a fine hatch (vertical bars, horizontal
/// bars or checker). Fully determined by (seed, split, per_class).
Dataset make_toy_dataset(std::uint64_t seed, std::size_t per_class, Split split = Split::kTrain);

std::string to_string(Split s);

}  // namespace kda
