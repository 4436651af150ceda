#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

#include "isonas/errors.hpp"
#include "isonas/random.hpp"
#include "isonas/tensor.hpp"

namespace isonas {

struct Dataset {
  Tensor4 images;
  std::vector<int> labels;
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }

  void validate() const {
    if (images.shape().batch != labels.size()) throw DimensionError("image and label counts differ");
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
        throw ConfigError("label " + std::to_string(labels[i]) + " at index " + std::to_string(i) +
                          " outside [0, " + std::to_string(num_classes) + ")");
      }
    }
  }

  Dataset subset(const std::vector<std::size_t>& idx) const {
    Shape4 s = images.shape();
    s.batch = idx.size();
    Dataset out;
    out.images = Tensor4(s);
    out.num_classes = num_classes;
    const std::size_t per = s.per_sample();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      auto src = images.sample(idx[i]);
      std::copy(src.begin(), src.end(), out.images.data().begin() + static_cast<std::ptrdiff_t>(i * per));
      out.labels.push_back(labels[idx[i]]);
    }
    return out;
  }
};

/// Shuffled split into (first, second) with `first_fraction` of the samples in first.
inline std::pair<Dataset, Dataset> split_dataset(const Dataset& d, double first_fraction, std::uint64_t seed) {
  std::vector<std::size_t> idx(d.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  rng.shuffle(idx.begin(), idx.end());
  const auto cut = static_cast<std::size_t>(std::round(first_fraction * static_cast<double>(d.size())));
  return {d.subset({idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(cut)}),
          d.subset({idx.begin() + static_cast<std::ptrdiff_t>(cut), idx.end()})};
}

/// Per-channel standardization in place; returns (mean, std) per channel.
inline std::vector<std::pair<double, double>> normalize_channels(Tensor4& images) {
  const auto s = images.shape();
  std::vector<std::pair<double, double>> stats;
  const double count = static_cast<double>(s.batch * s.plane());
  for (std::size_t c = 0; c < s.channels; ++c) {
    double mean = 0.0, sq = 0.0;
    for (std::size_t b = 0; b < s.batch; ++b)
      for (double v : images.plane(b, c)) mean += v;
    mean /= count;
    for (std::size_t b = 0; b < s.batch; ++b)
      for (double v : images.plane(b, c)) sq += (v - mean) * (v - mean);
    const double sd = std::sqrt(sq / count);
    const double inv = sd > 0.0 ? 1.0 / sd : 1.0;
    for (std::size_t b = 0; b < s.batch; ++b)
      for (double& v : images.plane(b, c)) v = (v - mean) * inv;
    stats.emplace_back(mean, sd);
  }
  return stats;
}

/// Gaussian blobs: class c is a bump exp(-r^2 / (2 s_c^2)) with its own width s_c,
/// centred at a uniform random pixel (wrap-around distance), plus Gaussian noise of
/// standard deviation `noise`. Every channel holds the same bump with its own noise.
inline Dataset make_blobs(std::size_t count, std::size_t classes, std::size_t channels, std::size_t size,
                          double noise, std::uint64_t seed) {
  if (classes < 1 || size < 1) throw ConfigError("blobs need at least one class and pixel");
  Rng rng(seed);
  Dataset d;
  d.num_classes = classes;
  d.images = Tensor4(Shape4{count, channels, size, size});
  const double n = static_cast<double>(size);
  // Widths grow geometrically from 0.6 pixels to a quarter of the image side.
  auto frac = [&](std::size_t c) { return classes > 1 ? static_cast<double>(c) / static_cast<double>(classes - 1) : 0.0; };
  auto wrap_dist = [&](double a, double b) {
    const double t = std::abs(a - b);
    return std::min(t, n - t);
  };
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t label = i % classes;
    d.labels.push_back(static_cast<int>(label));
    const double width = 0.6 * std::pow(std::max(1.0, n / 2.4), frac(label));
    const double cy = static_cast<double>(rng.below(size)), cx = static_cast<double>(rng.below(size));
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
          const double dy = wrap_dist(static_cast<double>(y), cy), dx = wrap_dist(static_cast<double>(x), cx);
          d.images(i, c, y, x) = 2.0 * std::exp(-(dy * dy + dx * dx) / (2.0 * width * width)) + noise * rng.normal();
        }
  }
  normalize_channels(d.images);
  return d;
}

/// Striped textures: class c is a sinusoidal grating with its own orientation and
/// frequency, random phase and per-channel amplitude, plus Gaussian noise.
inline Dataset make_stripes(std::size_t count, std::size_t classes, std::size_t channels, std::size_t size,
                            double noise, std::uint64_t seed) {
  Rng rng(seed);
  Dataset d;
  d.num_classes = classes;
  d.images = Tensor4(Shape4{count, channels, size, size});
  const double two_pi = 2.0 * std::numbers::pi;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t label = i % classes;
    d.labels.push_back(static_cast<int>(label));
    const double angle = std::numbers::pi * static_cast<double>(label) / static_cast<double>(classes);
    const double freq = (1.0 + static_cast<double>(label % 2)) / static_cast<double>(size);
    const double phase = two_pi * rng.uniform();
    for (std::size_t c = 0; c < channels; ++c) {
      const double amp = 0.5 + rng.uniform();
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
          const double t = std::cos(angle) * static_cast<double>(x) + std::sin(angle) * static_cast<double>(y);
          d.images(i, c, y, x) = amp * std::sin(two_pi * freq * t * 2.0 + phase) + noise * rng.normal();
        }
    }
  }
  normalize_channels(d.images);
  return d;
}

struct Augment {
  bool random_crop = false;
  std::size_t crop_padding = 2;  // zero-pad then crop back to the original size
  bool horizontal_flip = false;
};

struct Batch {
  Tensor4 images;
  std::vector<int> labels;
};

/// Mini-batches in an order reproducible from (seed, epoch).
class DatasetStream {
 public:
  DatasetStream(Dataset data, std::size_t batch_size, std::uint64_t seed, Augment augment = {},
                bool shuffle = true)
      : data_(std::move(data)), batch_size_(batch_size), seed_(seed), augment_(augment), shuffle_(shuffle) {
    data_.validate();
    if (batch_size_ == 0) throw ConfigError("batch size must be positive");
  }

  const Dataset& data() const { return data_; }
  std::size_t batch_size() const { return batch_size_; }

  /// Full batches plus a trailing partial batch when it holds at least two samples.
  std::size_t batches_per_epoch() const {
    const std::size_t full = data_.size() / batch_size_, rest = data_.size() % batch_size_;
    return full + (rest >= 2 ? 1 : 0);
  }

  std::vector<std::size_t> epoch_order(std::size_t epoch) const {
    std::vector<std::size_t> idx(data_.size());
    std::iota(idx.begin(), idx.end(), 0);
    if (shuffle_) {
      Rng rng(derive_seed(seed_, epoch));
      rng.shuffle(idx.begin(), idx.end());
    }
    return idx;
  }

  Batch batch(std::size_t epoch, std::size_t index) const {
    return batch_from(epoch_order(epoch), epoch, index);
  }

  std::vector<Batch> epoch(std::size_t e) const {
    const auto order = epoch_order(e);
    std::vector<Batch> out;
    for (std::size_t i = 0; i < batches_per_epoch(); ++i) out.push_back(batch_from(order, e, i));
    return out;
  }

 private:
  Batch batch_from(const std::vector<std::size_t>& order, std::size_t epoch, std::size_t index) const {
    const std::size_t begin = index * batch_size_;
    if (begin >= order.size()) throw ConfigError("batch index out of range");
    const std::size_t end = std::min(order.size(), begin + batch_size_);
    Batch b;
    Dataset sub = data_.subset({order.begin() + static_cast<std::ptrdiff_t>(begin),
                                order.begin() + static_cast<std::ptrdiff_t>(end)});
    b.images = std::move(sub.images);
    b.labels = std::move(sub.labels);
    if (augment_.random_crop || augment_.horizontal_flip) {
      Rng rng(derive_seed(derive_seed(seed_, epoch), 0x5eed0000ULL + index));
      apply_augment(b.images, rng);
    }
    return b;
  }

  void apply_augment(Tensor4& images, Rng& rng) const {
    const auto s = images.shape();
    Tensor4 out(s);
    const auto pad = static_cast<std::ptrdiff_t>(augment_.crop_padding);
    for (std::size_t n = 0; n < s.batch; ++n) {
      std::ptrdiff_t dy = 0, dx = 0;
      if (augment_.random_crop) {
        dy = static_cast<std::ptrdiff_t>(rng.below(static_cast<std::uint64_t>(2 * pad + 1))) - pad;
        dx = static_cast<std::ptrdiff_t>(rng.below(static_cast<std::uint64_t>(2 * pad + 1))) - pad;
      }
      const bool flip = augment_.horizontal_flip && rng.uniform() < 0.5;
      for (std::size_t c = 0; c < s.channels; ++c)
        for (std::size_t y = 0; y < s.height; ++y)
          for (std::size_t x = 0; x < s.width; ++x) {
            const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + dy;
            std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(flip ? s.width - 1 - x : x) + dx;
            if (sy < 0 || sx < 0 || sy >= static_cast<std::ptrdiff_t>(s.height) ||
                sx >= static_cast<std::ptrdiff_t>(s.width)) {
              continue;
            }
            out(n, c, y, x) = images(n, c, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
          }
    }
    images = std::move(out);
  }

  Dataset data_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  Augment augment_;
  bool shuffle_;
};

namespace detail {

inline std::uint32_t read_be32(const std::vector<unsigned char>& buf, std::size_t offset) {
  if (offset + 4 > buf.size()) throw ParseError("unexpected end of IDX header", buf.size());
  return (std::uint32_t{buf[offset]} << 24) | (std::uint32_t{buf[offset + 1]} << 16) |
         (std::uint32_t{buf[offset + 2]} << 8) | std::uint32_t{buf[offset + 3]};
}

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace detail

/// Raw IDX unsigned-byte arrays: images (magic 0x00000803, dims n x rows x cols)
/// and labels (magic 0x00000801, dim n).
struct IdxImages {
  std::size_t count = 0, rows = 0, cols = 0;
  std::vector<unsigned char> pixels;
};

inline IdxImages parse_idx_images(const std::vector<unsigned char>& buf) {
  const std::uint32_t magic = detail::read_be32(buf, 0);
  if (magic != 0x00000803) throw ParseError("bad IDX image magic", 0);
  IdxImages img;
  img.count = detail::read_be32(buf, 4);
  img.rows = detail::read_be32(buf, 8);
  img.cols = detail::read_be32(buf, 12);
  if (img.rows == 0 || img.cols == 0) throw ParseError("IDX image dimensions must be positive", 8);
  const std::size_t need = img.count * img.rows * img.cols;
  if (buf.size() < 16 + need) throw ParseError("truncated IDX image data", buf.size());
  img.pixels.assign(buf.begin() + 16, buf.begin() + static_cast<std::ptrdiff_t>(16 + need));
  return img;
}

inline std::vector<unsigned char> parse_idx_labels(const std::vector<unsigned char>& buf) {
  const std::uint32_t magic = detail::read_be32(buf, 0);
  if (magic != 0x00000801) throw ParseError("bad IDX label magic", 0);
  const std::size_t count = detail::read_be32(buf, 4);
  if (buf.size() < 8 + count) throw ParseError("truncated IDX label data", buf.size());
  return {buf.begin() + 8, buf.begin() + static_cast<std::ptrdiff_t>(8 + count)};
}

/// Images scaled to [0, 1]; `normalize` then standardizes each channel.
inline Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                        bool normalize = true) {
  const IdxImages img = parse_idx_images(detail::read_file(images_path));
  const auto labels = parse_idx_labels(detail::read_file(labels_path));
  if (labels.size() != img.count) {
    throw ParseError("label count " + std::to_string(labels.size()) + " differs from image count " +
                         std::to_string(img.count),
                     4);
  }
  Dataset d;
  d.images = Tensor4(Shape4{img.count, 1, img.rows, img.cols});
  for (std::size_t i = 0; i < img.pixels.size(); ++i) d.images[i] = img.pixels[i] / 255.0;
  int max_label = 0;
  for (unsigned char l : labels) {
    d.labels.push_back(l);
    max_label = std::max(max_label, static_cast<int>(l));
  }
  d.num_classes = static_cast<std::size_t>(max_label) + 1;
  if (normalize) normalize_channels(d.images);
  return d;
}

inline std::vector<unsigned char> encode_idx_images(std::size_t count, std::size_t rows, std::size_t cols,
                                                    const std::vector<unsigned char>& pixels) {
  std::vector<unsigned char> out;
  auto be32 = [&](std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<unsigned char>(v >> s));
  };
  be32(0x00000803);
  be32(static_cast<std::uint32_t>(count));
  be32(static_cast<std::uint32_t>(rows));
  be32(static_cast<std::uint32_t>(cols));
  out.insert(out.end(), pixels.begin(), pixels.end());
  return out;
}

inline std::vector<unsigned char> encode_idx_labels(const std::vector<unsigned char>& labels) {
  std::vector<unsigned char> out;
  auto be32 = [&](std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<unsigned char>(v >> s));
  };
  be32(0x00000801);
  be32(static_cast<std::uint32_t>(labels.size()));
  out.insert(out.end(), labels.begin(), labels.end());
  return out;
}

}  // namespace isonas
