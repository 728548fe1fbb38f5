#include "kda/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>

#include "kda/keyed_stream.hpp"

namespace kda {

std::string to_string(Split s) { return s == Split::kTrain ? "train" : "test"; }

Tensor Dataset::batch() const { return stack(images); }

Dataset Dataset::head(std::size_t n) const {
  Dataset out{name, split, class_count, {}, {}};
  n = std::min(n, size());
  out.images.assign(images.begin(), images.begin() + static_cast<long>(n));
  out.labels.assign(labels.begin(), labels.begin() + static_cast<long>(n));
  return out;
}

void Dataset::validate() const {
  if (images.size() != labels.size()) throw DataError("dataset image/label count mismatch");
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= class_count) {
      throw DataError("label out of range at record " + std::to_string(i));
    }
    if (images[i].tensor().shape() != images.front().tensor().shape()) {
      throw DataError("image shape differs at record " + std::to_string(i));
    }
  }
}

ImageTensor decode_cifar_record(const std::uint8_t* record, int* label) {
  if (label) *label = record[0];
  Tensor px({3, 32, 32});
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<double>(record[1 + i]) / 255.0;
  return ImageTensor(std::move(px));
}

std::array<std::uint8_t, kCifarRecordBytes> encode_cifar_record(const ImageTensor& image, int label) {
  if (image.channels() != 3 || image.height() != 32 || image.width() != 32) {
    throw std::invalid_argument("CIFAR records are 3 x 32 x 32");
  }
  if (label < 0 || label > 255) throw std::invalid_argument("CIFAR label must fit in one byte");
  std::array<std::uint8_t, kCifarRecordBytes> rec{};
  rec[0] = static_cast<std::uint8_t>(label);
  const auto& t = image.tensor();
  for (std::size_t i = 0; i < t.size(); ++i) rec[1 + i] = static_cast<std::uint8_t>(std::lround(t[i] * 255.0));
  return rec;
}

Dataset read_cifar10_file(const std::filesystem::path& file, std::size_t limit, Split split) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw DataError("cannot open CIFAR-10 file " + file.string());
  std::vector<std::uint8_t> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (raw.size() % kCifarRecordBytes != 0) {
    const std::size_t offset = raw.size() / kCifarRecordBytes * kCifarRecordBytes;
    throw DataError("malformed CIFAR-10 file " + file.string() + ": truncated record at byte offset " +
                    std::to_string(offset) + " (file size " + std::to_string(raw.size()) + " is not a multiple of " +
                    std::to_string(kCifarRecordBytes) + ")");
  }
  Dataset ds{"cifar10-subset", split, 10, {}, {}};
  const std::size_t n = std::min(limit, raw.size() / kCifarRecordBytes);
  for (std::size_t r = 0; r < n; ++r) {
    const std::uint8_t* rec = raw.data() + r * kCifarRecordBytes;
    if (rec[0] > 9) {
      throw DataError("malformed CIFAR-10 file " + file.string() + ": label " + std::to_string(rec[0]) +
                      " at byte offset " + std::to_string(r * kCifarRecordBytes));
    }
    int label = 0;
    ds.images.push_back(decode_cifar_record(rec, &label));
    ds.labels.push_back(label);
  }
  return ds;
}

DatasetPair load_cifar10(const std::filesystem::path& dir, std::size_t train_count, std::size_t test_count) {
  std::filesystem::path root = dir;
  if (!std::filesystem::exists(root / "test_batch.bin") && std::filesystem::exists(root / "cifar-10-batches-bin")) {
    root /= "cifar-10-batches-bin";
  }
  DatasetPair out;
  out.train = Dataset{"cifar10-subset", Split::kTrain, 10, {}, {}};
  for (int b = 1; b <= 5 && out.train.size() < train_count; ++b) {
    const auto part = read_cifar10_file(root / ("data_batch_" + std::to_string(b) + ".bin"),
                                        train_count - out.train.size(), Split::kTrain);
    out.train.images.insert(out.train.images.end(), part.images.begin(), part.images.end());
    out.train.labels.insert(out.train.labels.end(), part.labels.begin(), part.labels.end());
  }
  out.test = read_cifar10_file(root / "test_batch.bin", test_count, Split::kTest);
  if (out.train.size() < train_count || out.test.size() < test_count) {
    throw DataError("CIFAR-10 directory " + root.string() + " holds fewer records than requested");
  }
  return out;
}

namespace {

constexpr std::size_t kSide = 32;

struct Rgb {
  double r, g, b;
};

double luminance(const Rgb& c) { return 0.299 * c.r + 0.587 * c.g + 0.114 * c.b; }

Rgb random_colour(KeyedStream& s) { return {s.uniform(), s.uniform(), s.uniform()}; }

// Membership test in coordinates relative to the figure centre, scaled by size.
using Figure = bool (*)(double dy, double dx, double s);

constexpr std::array<Figure, 4> kFigures{
    // disk
    [](double dy, double dx, double s) { return dy * dy + dx * dx <= s * s; },
    // square
    [](double dy, double dx, double s) { return std::abs(dy) <= 0.85 * s && std::abs(dx) <= 0.85 * s; },
    // upward triangle
    [](double dy, double dx, double s) { return dy <= 0.8 * s && dy >= -0.9 * s && std::abs(dx) <= (dy + 0.9 * s) * 0.6; },
    // plus
    [](double dy, double dx, double s) {
      return (std::abs(dy) <= 0.25 * s && std::abs(dx) <= s) || (std::abs(dx) <= 0.25 * s && std::abs(dy) <= s);
    },
};

// Fine texture: bars two pixels wide along one axis, or a one-pixel checker.
// Both pass the median pre-filter unchanged.
enum class Hatch { kVertical, kHorizontal, kChecker };

double hatch_value(Hatch h, std::size_t y, std::size_t x) {
  switch (h) {
    case Hatch::kVertical: return ((x / 2) % 2) ? 1.0 : -1.0;
    case Hatch::kHorizontal: return ((y / 2) % 2) ? 1.0 : -1.0;
    case Hatch::kChecker: return ((x + y) % 2) ? 1.0 : -1.0;
  }
  return 0.0;
}

// Labels 0-3: a flat figure at a jittered position. Labels 4-9: a centred
// 16x16 square with a fine hatch over one half; the pair (4,5) differs only
// in which half is hatched, as do (6,7) and (8,9).
ImageTensor draw_toy(int label, KeyedStream& s) {
  Rgb bg = random_colour(s);
  Rgb fg = random_colour(s);
  while (std::abs(luminance(fg) - luminance(bg)) < 0.3) fg = random_colour(s);
  const double noise = 0.04;
  ImageTensor img(3, kSide, kSide);
  if (label < 4) {
    const Figure fig = kFigures[static_cast<std::size_t>(label)];
    const double size = s.uniform(7.0, 11.0);
    const double cy = 15.5 + s.uniform(-4.0, 4.0);
    const double cx = 15.5 + s.uniform(-4.0, 4.0);
    for (std::size_t y = 0; y < kSide; ++y) {
      for (std::size_t x = 0; x < kSide; ++x) {
        const bool on = fig(static_cast<double>(y) - cy, static_cast<double>(x) - cx, size);
        const Rgb& c = on ? fg : bg;
        img.set(0, y, x, c.r + noise * s.normal());
        img.set(1, y, x, c.g + noise * s.normal());
        img.set(2, y, x, c.b + noise * s.normal());
      }
    }
    return img;
  }
  const int k = label - 4;
  const Hatch hatch = k < 2 ? Hatch::kVertical : (k < 4 ? Hatch::kHorizontal : Hatch::kChecker);
  const bool second = k % 2;
  const bool split_rows = hatch == Hatch::kHorizontal;
  const long oy = static_cast<long>(s.below(3)) - 1;
  const long ox = static_cast<long>(s.below(3)) - 1;
  const double amp = s.uniform(0.12, 0.22);
  for (std::size_t y = 0; y < kSide; ++y) {
    for (std::size_t x = 0; x < kSide; ++x) {
      const long ly = static_cast<long>(y) - 8 - oy;
      const long lx = static_cast<long>(x) - 8 - ox;
      const bool on = ly >= 0 && ly < 16 && lx >= 0 && lx < 16;
      double t = 0.0;
      if (on) {
        const bool half = split_rows ? ly >= 8 : lx >= 8;
        if (half == second) t = amp * hatch_value(hatch, y, x);
      }
      const Rgb& c = on ? fg : bg;
      img.set(0, y, x, c.r + t + noise * s.normal());
      img.set(1, y, x, c.g + t + noise * s.normal());
      img.set(2, y, x, c.b + t + noise * s.normal());
    }
  }
  return img;
}

}  // namespace

Dataset make_toy_dataset(std::uint64_t seed, std::size_t per_class, Split split) {
  if (per_class == 0) throw std::invalid_argument("per_class must be >= 1");
  Dataset ds{"toy-shapes", split, 10, {}, {}};
  const SecretKey base = SecretKey::from_seed(seed).derive(split == Split::kTrain ? "toy-train" : "toy-test");
  ds.images.reserve(per_class * 10);
  for (std::size_t n = 0; n < per_class; ++n) {
    for (int label = 0; label < 10; ++label) {
      const std::uint64_t idx[2] = {n, static_cast<std::uint64_t>(label)};
      KeyedStream s(base.derive("sample", idx));
      ds.images.push_back(draw_toy(label, s));
      ds.labels.push_back(label);
    }
  }
  return ds;
}

}  // namespace kda
