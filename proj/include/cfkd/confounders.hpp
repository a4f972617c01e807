#pragma once

// Synthetic base imagery, the three continuous confounder transforms, the
// four-cell full pool and alpha-poisoned subsets, plus the PNG + JSON
// manifest on-disk format.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "cfkd/error.hpp"
#include "cfkd/image.hpp"
#include "cfkd/labeled_dataset.hpp"
#include "cfkd/png_io.hpp"

namespace cfkd {

enum class ConfounderKind { corner_tag, intensity_shift, color_shift };

inline std::string to_string(ConfounderKind k) {
  switch (k) {
    case ConfounderKind::corner_tag: return "corner_tag";
    case ConfounderKind::intensity_shift: return "intensity_shift";
    case ConfounderKind::color_shift: return "color_shift";
  }
  return "?";
}

inline ConfounderKind confounder_kind_from_string(const std::string& s) {
  if (s == "corner_tag") return ConfounderKind::corner_tag;
  if (s == "intensity_shift") return ConfounderKind::intensity_shift;
  if (s == "color_shift") return ConfounderKind::color_shift;
  throw ConfigError("unknown confounder kind '" + s + "'", "kind");
}

// Which side of the threshold a transform is applied for. For the additive
// transforms the side picks the sign; the corner tag ignores it.
enum class Side { confounder, clean };

// Magnitudes on the 0..255 scale.
inline constexpr double kIntensityShift = 24.0;
inline constexpr double kColorShiftRed = 24.0;
inline constexpr double kColorShiftOther = 12.0;
inline constexpr int kTagSize = 6;
inline constexpr int kTagMargin = 1;

// 6x6 "(c)" glyph; '#' pixels are blended toward white.
inline constexpr std::array<const char*, kTagSize> kTagGlyph = {
    ".####.", "#....#", "#.##.#", "#.#..#", "#.##.#", ".####."};

inline double clip01(double v) { return std::clamp(v, 0.0, 1.0); }

// Apply one confounder transform at strength u in [0,1].
//  corner_tag:      glyph alpha-blended at opacity u (side ignored)
//  intensity_shift: every value +/- 24u/255 (sign from side), clipped
//  color_shift:     red +/- 24u/255, green and blue -/+ 12u/255, clipped
inline ImageTensor apply_confounder(const ImageTensor& x, ConfounderKind kind,
                                    double u, Side side) {
  if (!(u >= 0.0 && u <= 1.0))
    throw ConfigError("confounder strength must be in [0,1]", "u");
  ImageTensor out = x;
  const double sign = side == Side::confounder ? 1.0 : -1.0;
  switch (kind) {
    case ConfounderKind::intensity_shift: {
      const double d = sign * (kIntensityShift * u) / 255.0;
      for (double& v : out.values()) v = clip01(v + d);
      break;
    }
    case ConfounderKind::color_shift: {
      if (x.channels() != 3)
        throw InputError("color_shift needs a 3-channel image");
      const double dr = sign * (kColorShiftRed * u) / 255.0;
      const double dgb = -sign * (kColorShiftOther * u) / 255.0;
      for (int y = 0; y < x.height(); ++y)
        for (int q = 0; q < x.width(); ++q) {
          out.at(y, q, 0) = clip01(out.at(y, q, 0) + dr);
          out.at(y, q, 1) = clip01(out.at(y, q, 1) + dgb);
          out.at(y, q, 2) = clip01(out.at(y, q, 2) + dgb);
        }
      break;
    }
    case ConfounderKind::corner_tag: {
      const int y0 = x.height() - kTagMargin - kTagSize;
      const int x0 = x.width() - kTagMargin - kTagSize;
      if (y0 < 0 || x0 < 0) throw InputError("image too small for the tag");
      for (int r = 0; r < kTagSize; ++r)
        for (int c = 0; c < kTagSize; ++c) {
          if (kTagGlyph[r][c] != '#') continue;
          for (int ch = 0; ch < x.channels(); ++ch) {
            double& v = out.at(y0 + r, x0 + c, ch);
            v = (1.0 - u) * v + u * 1.0;
          }
        }
      break;
    }
  }
  return out;
}

// Mapping from the stored underlying variable u to the transform applied.
struct ConfounderState {
  double strength = 0.0;
  Side side = Side::clean;
  bool has_confounder = false;
};

// corner_tag: opacity = u, confounder iff u < 0.5.
// intensity/color: confounder iff u > 0.5, strength |2u - 1|.
inline ConfounderState confounder_state(ConfounderKind kind, double u) {
  ConfounderState s;
  if (kind == ConfounderKind::corner_tag) {
    s.has_confounder = u < 0.5;
    s.strength = u;
  } else {
    s.has_confounder = u > 0.5;
    s.strength = std::abs(2.0 * u - 1.0);
  }
  s.side = s.has_confounder ? Side::confounder : Side::clean;
  return s;
}

inline bool has_confounder(ConfounderKind kind, double u) {
  return confounder_state(kind, u).has_confounder;
}

inline ImageTensor render_confounder(const ImageTensor& x, ConfounderKind kind,
                                     double u) {
  const auto s = confounder_state(kind, u);
  return apply_confounder(x, kind, s.strength, s.side);
}

// u drawn uniformly on the requested side of the threshold.
template <typename Rng>
inline double sample_u(ConfounderKind kind, bool confounder, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double r = unit(rng);  // [0,1)
  const bool low_side = kind == ConfounderKind::corner_tag ? confounder
                                                           : !confounder;
  // low side: [0, 0.5) for the tag's confounder, [0, 0.5] otherwise;
  // high side: (0.5, 1] for additive confounders, [0.5, 1) for the tag.
  if (low_side) return 0.5 * r;
  return kind == ConfounderKind::corner_tag ? 0.5 + 0.5 * r : 1.0 - 0.5 * r;
}

// Base imagery: class 0 horizontal stripes, class 1 vertical stripes.
struct BaseSampleSpec {
  int height = 16;
  int width = 16;
  int channels = 3;
  double stripe_period = 4.0;
  double stripe_amplitude = 0.05;
  double noise_sigma = 0.05;
  double background = 0.5;

  ImageShape shape() const { return {height, width, channels}; }

  nlohmann::json to_json() const {
    return {{"height", height},
            {"width", width},
            {"channels", channels},
            {"stripe_period", stripe_period},
            {"stripe_amplitude", stripe_amplitude},
            {"noise_sigma", noise_sigma},
            {"background", background}};
  }
  static BaseSampleSpec from_json(const nlohmann::json& j) {
    BaseSampleSpec b;
    b.height = j.value("height", b.height);
    b.width = j.value("width", b.width);
    b.channels = j.value("channels", b.channels);
    b.stripe_period = j.value("stripe_period", b.stripe_period);
    b.stripe_amplitude = j.value("stripe_amplitude", b.stripe_amplitude);
    b.noise_sigma = j.value("noise_sigma", b.noise_sigma);
    b.background = j.value("background", b.background);
    return b;
  }
  void validate() const {
    if (height < kTagSize + 2 * kTagMargin || width < kTagSize + 2 * kTagMargin)
      throw ConfigError("image must be at least 8x8", "dataset.height");
    if (height % 4 != 0 || width % 4 != 0)
      throw ConfigError("image height and width must be multiples of 4",
                        "dataset.height");
    if (channels != 3) throw ConfigError("base images are RGB", "dataset.channels");
    if (!(stripe_period > 0.0))
      throw ConfigError("stripe_period must be > 0", "dataset.stripe_period");
    if (noise_sigma < 0.0)
      throw ConfigError("noise_sigma must be >= 0", "dataset.noise_sigma");
  }
};

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

template <typename Rng>
inline ImageTensor render_base(const BaseSampleSpec& spec, int label, Rng& rng) {
  std::uniform_real_distribution<double> phase_d(0.0, 2.0 * std::numbers::pi);
  std::normal_distribution<double> noise(0.0, spec.noise_sigma);
  const double phase = phase_d(rng);
  const double k = 2.0 * std::numbers::pi / spec.stripe_period;
  ImageTensor img(spec.shape());
  for (int y = 0; y < spec.height; ++y)
    for (int x = 0; x < spec.width; ++x) {
      const double coord = label == 0 ? y : x;
      const double base =
          spec.background + spec.stripe_amplitude * std::sin(k * coord + phase);
      for (int c = 0; c < spec.channels; ++c)
        img.at(y, x, c) = clip01(base + (spec.noise_sigma > 0 ? noise(rng) : 0.0));
    }
  return img;
}

struct SplitSizes {
  std::size_t train = 3200;
  std::size_t validation = 800;
  std::size_t test = 800;
};

// Every split holds exactly 25% of each (label, has_confounder) cell. Images
// are snapped to the 8-bit grid so in-memory and on-disk datasets agree.
inline LabeledDataset build_full_dataset(const BaseSampleSpec& base,
                                         ConfounderKind kind,
                                         const SplitSizes& sizes,
                                         std::uint64_t seed) {
  base.validate();
  const std::array<std::pair<Split, std::size_t>, 3> splits = {
      std::pair{Split::train, sizes.train},
      std::pair{Split::validation, sizes.validation},
      std::pair{Split::test_unpoisoned, sizes.test}};
  for (const auto& [sp, n] : splits)
    if (n % 4 != 0)
      throw ConfigError("split '" + to_string(sp) + "' size " +
                            std::to_string(n) + " is not divisible by 4",
                        "dataset.sizes." + to_string(sp));

  LabeledDataset d(base.shape(), 2);
  for (const auto& [sp, n] : splits) {
    const std::uint64_t split_seed = mix_seed(seed, static_cast<std::uint64_t>(sp));
    if (n == 0) continue;
    std::vector<Sample> part;
    part.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      const int label = static_cast<int>((i / (n / 4)) / 2);
      const bool conf = ((i / (n / 4)) % 2) == 1;
      std::mt19937_64 rng(mix_seed(split_seed, i));
      Sample s;
      s.label = label;
      s.split = sp;
      s.u = sample_u(kind, conf, rng);
      s.has_confounder = has_confounder(kind, s.u);
      s.image = quantized(render_confounder(render_base(base, label, rng), kind, s.u));
      part.push_back(std::move(s));
    }
    std::mt19937_64 shuf(mix_seed(split_seed, 0xFFFF));
    std::shuffle(part.begin(), part.end(), shuf);
    for (auto& s : part) d.add(std::move(s));
  }
  return d;
}

struct PoisonSpec {
  double alpha = 1.0;
  std::size_t train_size = 1000;
  std::size_t validation_size = 200;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0))
      throw ConfigError("alpha must be in [0,1]", "poison.alpha");
    if (train_size % 2 != 0 || validation_size % 2 != 0)
      throw ConfigError("poisoned split sizes must be even", "poison.train");
  }
};

// Per-cell counts for a poisoned split of size n, indexed [label][flag].
// Aligned cells are (1, conf) and (0, clean).
inline CellCounts poisoned_cell_counts(double alpha, std::size_t n) {
  const auto aligned_half =
      static_cast<std::size_t>(std::llround(alpha * static_cast<double>(n) / 2.0));
  const std::size_t anti_half = n / 2 - aligned_half;
  CellCounts c{};
  c[1][1] = aligned_half;
  c[0][0] = aligned_half;
  c[1][0] = anti_half;
  c[0][1] = anti_half;
  return c;
}

// Draws poisoned train and validation splits from the full pool's train and
// validation samples; the unpoisoned test split is carried over unchanged.
inline LabeledDataset build_poisoned_subset(const LabeledDataset& full,
                                            const PoisonSpec& poison) {
  poison.validate();
  std::array<std::array<std::vector<std::size_t>, 2>, 2> pool;
  for (std::size_t i = 0; i < full.size(); ++i) {
    const auto& s = full[i];
    if (s.split == Split::test_unpoisoned || s.label > 1) continue;
    pool[s.label][s.has_confounder].push_back(i);
  }
  std::mt19937_64 rng(mix_seed(poison.seed, 0x5EED));
  for (auto& row : pool)
    for (auto& cell : row) std::shuffle(cell.begin(), cell.end(), rng);

  const CellCounts tr = poisoned_cell_counts(poison.alpha, poison.train_size);
  const CellCounts va = poisoned_cell_counts(poison.alpha, poison.validation_size);
  for (int l = 0; l < 2; ++l)
    for (int f = 0; f < 2; ++f)
      if (tr[l][f] + va[l][f] > pool[l][f].size())
        throw ConfigError("insufficient pool for cell (label=" +
                              std::to_string(l) + ", has_confounder=" +
                              (f ? "true" : "false") + "): need " +
                              std::to_string(tr[l][f] + va[l][f]) + ", have " +
                              std::to_string(pool[l][f].size()),
                          "poison");

  LabeledDataset out(full.shape(), full.num_classes());
  auto take = [&](const CellCounts& counts, std::size_t offset_mult, Split sp) {
    std::vector<Sample> part;
    for (int l = 0; l < 2; ++l)
      for (int f = 0; f < 2; ++f) {
        const std::size_t off = offset_mult ? tr[l][f] : 0;
        for (std::size_t k = 0; k < counts[l][f]; ++k) {
          Sample s = full[pool[l][f][off + k]];
          s.split = sp;
          part.push_back(std::move(s));
        }
      }
    std::shuffle(part.begin(), part.end(), rng);
    for (auto& s : part) out.add(std::move(s));
  };
  take(tr, 0, Split::train);
  take(va, 1, Split::validation);
  for (const auto& s : full.samples())
    if (s.split == Split::test_unpoisoned) out.add(s);
  return out;
}

// ---- manifest --------------------------------------------------------------

inline constexpr int kManifestSchemaVersion = 1;

inline nlohmann::json cell_counts_json(const LabeledDataset& d) {
  nlohmann::json j;
  for (Split sp : {Split::train, Split::validation, Split::test_unpoisoned}) {
    const auto c = d.cell_counts(sp);
    j[to_string(sp)] = {{c[0][0], c[0][1]}, {c[1][0], c[1][1]}};
  }
  return j;
}

// Writes PNGs for samples without a path (assigning images/<split>_<n>.png)
// and a manifest listing every sample. Paths are relative to the manifest.
inline void write_manifest(const std::filesystem::path& manifest_path,
                           LabeledDataset& d, const nlohmann::json& extra = {}) {
  namespace fs = std::filesystem;
  const fs::path root = manifest_path.parent_path();
  fs::create_directories(root);
  nlohmann::json samples = nlohmann::json::array();
  std::size_t n = 0;
  for (auto& s : d.mutable_samples()) {
    if (s.path.empty()) {
      char name[64];
      std::snprintf(name, sizeof name, "images/%s_%05zu.png",
                    to_string(s.split).c_str(), n);
      s.path = name;
      write_png(root / s.path, s.image);
    } else if (!fs::exists(root / s.path)) {
      write_png(root / s.path, s.image);
    }
    ++n;
    samples.push_back({{"path", s.path},
                       {"label", s.label},
                       {"u", s.u},
                       {"has_confounder", s.has_confounder},
                       {"split", to_string(s.split)}});
  }
  nlohmann::json j = {{"schema_version", kManifestSchemaVersion},
                      {"shape", {d.shape().height, d.shape().width, d.shape().channels}},
                      {"num_classes", d.num_classes()},
                      {"cell_counts", cell_counts_json(d)},
                      {"samples", samples}};
  for (auto it = extra.begin(); extra.is_object() && it != extra.end(); ++it)
    j[it.key()] = it.value();
  std::ofstream out(manifest_path);
  out << j.dump(1) << "\n";
  if (!out) throw ConfigError("cannot write " + manifest_path.string());
}

inline LabeledDataset read_manifest(const std::filesystem::path& manifest_path) {
  namespace fs = std::filesystem;
  std::ifstream in(manifest_path);
  if (!in) throw ConfigError("cannot open manifest " + manifest_path.string());
  const nlohmann::json j = nlohmann::json::parse(in);
  if (j.value("schema_version", 0) != kManifestSchemaVersion)
    throw ConfigError("unsupported manifest schema version", "schema_version");
  const auto& sh = j.at("shape");
  LabeledDataset d(ImageShape{sh.at(0), sh.at(1), sh.at(2)},
                   j.value("num_classes", 2));
  const fs::path root = manifest_path.parent_path();
  for (const auto& e : j.at("samples")) {
    Sample s;
    s.path = e.at("path");
    if (!fs::exists(root / s.path))
      throw ConfigError("manifest references missing file " + s.path,
                        "samples.path");
    s.image = read_png(root / s.path);
    s.label = e.at("label");
    s.u = e.at("u");
    s.has_confounder = e.at("has_confounder");
    s.split = split_from_string(e.at("split"));
    d.add(std::move(s));
  }
  return d;
}

}  // namespace cfkd
