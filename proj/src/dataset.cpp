#include "vitplast/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <random>

#include <json.hpp>

#include "vitplast/errors.hpp"
#include "vitplast/tensor_io.hpp"

namespace vitplast {

namespace {

using json = nlohmann::json;

constexpr const char* kManifestSchema = "vitplast.dataset/1";

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  const std::filesystem::path path(p);
  return path.is_absolute() ? path : base / path;
}

}  // namespace

DatasetManifest read_manifest(const std::filesystem::path& path) {
  json doc;
  try {
    doc = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw FormatError("manifest " + path.string() + ": " + e.what());
  }
  if (doc.value("schema", "") != kManifestSchema) {
    throw FormatError("manifest " + path.string() + " has no " + kManifestSchema + " schema tag");
  }
  DatasetManifest m;
  try {
    m.name = doc.value("name", "");
    m.images = doc.at("images").get<std::string>();
    m.labels = doc.at("labels").get<std::string>();
    m.num_classes = doc.at("num_classes").get<std::size_t>();
    m.mean = doc.at("normalization").at("mean").get<std::vector<double>>();
    m.stddev = doc.at("normalization").at("std").get<std::vector<double>>();
    m.split_seed = doc.value("split_seed", std::uint64_t{0});
  } catch (const json::exception& e) {
    throw FormatError("manifest " + path.string() + ": " + e.what());
  }
  if (m.num_classes == 0) throw DataError("manifest declares zero classes");
  if (m.mean.size() != m.stddev.size()) throw DataError("manifest mean/std lengths differ");
  for (double s : m.stddev) {
    if (!(s > 0)) throw DataError("manifest std entries must be positive");
  }
  return m;
}

void write_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  json doc = {
      {"schema", kManifestSchema},
      {"name", m.name},
      {"images", m.images},
      {"labels", m.labels},
      {"num_classes", m.num_classes},
      {"normalization", {{"mean", m.mean}, {"std", m.stddev}}},
      {"split_seed", m.split_seed},
  };
  write_file_atomic(path, doc.dump(2) + "\n");
}

Tensor normalize_images(const Tensor& raw, bool from_u8, const std::vector<double>& mean,
                        const std::vector<double>& stddev) {
  if (raw.rank() != 4) throw DimensionError("images must be [N, C, H, W], got " + shape_string(raw.shape()));
  const std::size_t n = raw.dim(0), c = raw.dim(1), plane = raw.dim(2) * raw.dim(3);
  if (mean.size() != c || stddev.size() != c) {
    throw DataError("normalization has " + std::to_string(mean.size()) +
                    " channels, images have " + std::to_string(c));
  }
  Tensor out(raw.shape());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (i * c + ch) * plane;
      for (std::size_t p = 0; p < plane; ++p) {
        double v = raw[base + p];
        if (from_u8) v /= 255.0;
        out[base + p] = (v - mean[ch]) / stddev[ch];
      }
    }
  }
  return out;
}

Dataset load_dataset(const std::filesystem::path& manifest_path) {
  const DatasetManifest m = read_manifest(manifest_path);
  const auto base = manifest_path.parent_path();

  DType image_type{};
  const Tensor raw = read_tensor_file(resolve(base, m.images), std::nullopt, &image_type);
  if (image_type == DType::F64) throw FormatError("images must be stored as u8 or f32");
  if (raw.rank() != 4 || raw.dim(2) != raw.dim(3)) {
    throw DimensionError("images must be square [N, C, H, W], got " + shape_string(raw.shape()));
  }
  DType label_type{};
  const Tensor labels = read_tensor_file(resolve(base, m.labels), std::nullopt, &label_type);
  if (label_type == DType::F64) throw FormatError("labels must be stored as u8 or f32");
  if (labels.rank() != 1 || labels.size() != raw.dim(0)) {
    throw DataError("labels " + shape_string(labels.shape()) + " do not match " +
                    std::to_string(raw.dim(0)) + " images");
  }

  Dataset d;
  d.num_classes = m.num_classes;
  d.split_seed = m.split_seed;
  d.labels.reserve(labels.size());
  for (double v : labels.values()) {
    if (v != std::floor(v) || v < 0 || v >= static_cast<double>(m.num_classes)) {
      throw DataError("label " + std::to_string(v) + " outside [0, " +
                      std::to_string(m.num_classes) + ")");
    }
    d.labels.push_back(static_cast<int>(v));
  }
  d.images = normalize_images(raw, image_type == DType::U8, m.mean, m.stddev);
  return d;
}

Dataset subset(const Dataset& data, const std::vector<std::size_t>& indices) {
  const Shape& s = data.images.shape();
  const std::size_t stride = s[1] * s[2] * s[3];
  Dataset out;
  out.num_classes = data.num_classes;
  out.split_seed = data.split_seed;
  out.images = Tensor({indices.size(), s[1], s[2], s[3]});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= data.size()) throw DataError("subset index out of range");
    std::copy_n(data.images.data() + indices[i] * stride, stride, out.images.data() + i * stride);
    out.labels.push_back(data.labels[indices[i]]);
  }
  return out;
}

Split split_indices(std::size_t n, double val_fraction, std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw DataError("val_fraction must lie in (0, 1)");
  }
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  const auto n_val = static_cast<std::size_t>(std::llround(static_cast<double>(n) * val_fraction));
  Split s;
  s.train.assign(perm.begin(), perm.end() - static_cast<std::ptrdiff_t>(n_val));
  s.val.assign(perm.end() - static_cast<std::ptrdiff_t>(n_val), perm.end());
  return s;
}

std::string_view task_name(SyntheticTask task) {
  return task == SyntheticTask::PatchColor ? "patch_color" : "shifted_patch_color";
}

SyntheticTask parse_task(std::string_view name) {
  if (name == "patch_color") return SyntheticTask::PatchColor;
  if (name == "shifted_patch_color") return SyntheticTask::ShiftedPatchColor;
  throw DataError("unknown synthetic task '" + std::string(name) + "'");
}

SyntheticData generate_synthetic(const SyntheticOptions& o) {
  if (o.n_samples == 0 || o.image_size == 0 || o.num_classes == 0 || o.patch_size == 0) {
    throw DataError("synthetic sizes must be positive");
  }
  if (o.patch_size > o.image_size) throw DataError("designated patch larger than the image");
  constexpr std::size_t kChannels = 3;
  const std::size_t s = o.image_size;
  const double pi = std::acos(-1.0);

  // Class colors spread around a hue circle.
  std::vector<std::array<double, kChannels>> palette(o.num_classes);
  for (std::size_t c = 0; c < o.num_classes; ++c) {
    const double angle = 2 * pi * static_cast<double>(c) / static_cast<double>(o.num_classes);
    for (std::size_t ch = 0; ch < kChannels; ++ch) {
      palette[c][ch] = 128.0 + 64.0 * std::cos(angle + 2 * pi * static_cast<double>(ch) / 3.0);
    }
  }

  SyntheticData out;
  out.labels.resize(o.n_samples);
  for (std::size_t i = 0; i < o.n_samples; ++i) out.labels[i] = static_cast<int>(i % o.num_classes);
  std::mt19937_64 rng(o.seed);
  std::shuffle(out.labels.begin(), out.labels.end(), rng);

  std::uniform_real_distribution<double> background(0.0, 255.0);
  std::normal_distribution<double> noise(0.0, 40.0);
  out.pixels = Tensor({o.n_samples, kChannels, s, s});
  const bool shifted = o.task == SyntheticTask::ShiftedPatchColor;
  for (std::size_t i = 0; i < o.n_samples; ++i) {
    std::array<std::vector<double>, kChannels> planes;
    for (std::size_t ch = 0; ch < kChannels; ++ch) {
      planes[ch].resize(s * s);
      for (std::size_t y = 0; y < s; ++y) {
        for (std::size_t x = 0; x < s; ++x) {
          const bool in_patch = y < o.patch_size && x < o.patch_size;
          planes[ch][y * s + x] =
              in_patch ? palette[out.labels[i]][ch] + noise(rng) : background(rng);
        }
      }
    }
    for (std::size_t ch = 0; ch < kChannels; ++ch) {
      // The shifted variant reads channel (ch + 1) and halves the contrast.
      const auto& src = planes[shifted ? (ch + 1) % kChannels : ch];
      double* dst = out.pixels.data() + (i * kChannels + ch) * s * s;
      for (std::size_t p = 0; p < s * s; ++p) {
        double v = shifted ? 128.0 + 0.5 * (src[p] - 128.0) : src[p];
        dst[p] = std::clamp(std::round(v), 0.0, 255.0);
      }
    }
  }
  return out;
}

std::filesystem::path write_synthetic(const SyntheticOptions& options,
                                      const std::filesystem::path& dir, const std::string& stem) {
  const SyntheticData data = generate_synthetic(options);
  std::filesystem::create_directories(dir);

  Tensor labels({data.labels.size()});
  for (std::size_t i = 0; i < data.labels.size(); ++i) labels[i] = data.labels[i];
  write_tensor_file(dir / (stem + ".images.vten"), data.pixels, DType::U8);
  write_tensor_file(dir / (stem + ".labels.vten"), labels, DType::U8);

  DatasetManifest m;
  m.name = std::string(task_name(options.task));
  m.images = stem + ".images.vten";
  m.labels = stem + ".labels.vten";
  m.num_classes = options.num_classes;
  m.split_seed = options.seed;
  const std::size_t c = data.pixels.dim(1), plane = data.pixels.dim(2) * data.pixels.dim(3);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum = 0, sum2 = 0;
    for (std::size_t i = 0; i < data.pixels.dim(0); ++i) {
      const double* p = data.pixels.data() + (i * c + ch) * plane;
      for (std::size_t k = 0; k < plane; ++k) {
        sum += p[k] / 255.0;
        sum2 += (p[k] / 255.0) * (p[k] / 255.0);
      }
    }
    const double count = static_cast<double>(data.pixels.dim(0) * plane);
    const double mean = sum / count;
    m.mean.push_back(mean);
    m.stddev.push_back(std::sqrt(std::max(sum2 / count - mean * mean, 1e-12)));
  }
  const auto path = dir / (stem + ".json");
  write_manifest(path, m);
  return path;
}

}  // namespace vitplast
