// Copyright 2026 The vlmdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "vlmdiff/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "vlmdiff/error.hpp"
#include "vlmdiff/hash.hpp"

namespace vlmdiff {

namespace fs = std::filesystem;

std::vector<std::size_t> DatasetIndex::ids(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].split == split) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> DatasetIndex::ids(Split split, const std::string& category) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].split == split && records[i].category == category) out.push_back(i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Industrial layout
// ---------------------------------------------------------------------------

namespace {

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp";
}

std::vector<fs::path> sorted_images(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && is_image_file(e.path())) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<fs::path> sorted_subdirs(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_directory()) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

DatasetIndex scan_industrial_layout(const fs::path& root, Resolution resolution) {
  if (resolution.height <= 0 || resolution.width <= 0) throw user_error("resolution must be positive");
  if (!fs::is_directory(root)) throw io_error("dataset root not found: " + root.string());

  DatasetIndex index;
  index.root = root;
  index.resolution = resolution;

  for (const auto& cat_dir : sorted_subdirs(root)) {
    if (!fs::is_directory(cat_dir / "train") && !fs::is_directory(cat_dir / "test")) continue;
    const std::string category = cat_dir.filename().string();
    const auto train = sorted_images(cat_dir / "train" / "good");
    if (train.empty()) throw user_error("empty train split for category '" + category + "' under " + root.string());
    index.categories.push_back(category);

    auto make = [&](const fs::path& p, Split split, const std::string& defect) {
      ImageRecord r;
      r.path = p;
      r.key = fs::relative(p, root).generic_string();
      r.category = category;
      r.split = split;
      r.defect = defect;
      return r;
    };
    for (const auto& p : train) index.records.push_back(make(p, Split::train, "good"));

    for (const auto& defect_dir : sorted_subdirs(cat_dir / "test")) {
      const std::string defect = defect_dir.filename().string();
      for (const auto& p : sorted_images(defect_dir)) {
        ImageRecord r = make(p, Split::test, defect);
        if (defect != "good") {
          r.label = Label::anomalous;
          const fs::path mask = cat_dir / "ground_truth" / defect / (p.stem().string() + "_mask.png");
          if (!fs::is_regular_file(mask)) {
            throw user_error("mask not found: " + mask.string() + " (for " + p.string() + ")");
          }
          if (load_mask(mask, resolution).count_nonzero() == 0) {
            throw user_error("mask has no anomalous pixels: " + mask.string());
          }
          r.mask_path = mask;
        }
        index.records.push_back(std::move(r));
      }
    }
  }
  if (index.categories.empty()) throw user_error("no categories with a train/good split under " + root.string());
  return index;
}

// ---------------------------------------------------------------------------
// Synthetic shapes
// ---------------------------------------------------------------------------

namespace {

constexpr std::array kKnownShapes{"circle", "square", "triangle"};

struct NamedColor {
  const char* name;
  float r, g, b;
};

constexpr std::array kPalette{
    NamedColor{"red", 0.85f, 0.18f, 0.16f},    NamedColor{"green", 0.20f, 0.68f, 0.26f},
    NamedColor{"blue", 0.18f, 0.32f, 0.85f},   NamedColor{"yellow", 0.93f, 0.82f, 0.18f},
    NamedColor{"orange", 0.95f, 0.55f, 0.12f}, NamedColor{"purple", 0.58f, 0.25f, 0.72f},
    NamedColor{"cyan", 0.15f, 0.75f, 0.82f},
};

// Uniform doubles straight from the engine so the stream does not depend on the
// standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n; }

 private:
  std::mt19937_64 engine_;
};

struct ShapeGeometry {
  std::string kind;
  double cx = 0, cy = 0, size = 0;  // size: radius / half side / circumradius

  bool contains(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    if (kind == "circle") return dx * dx + dy * dy <= size * size;
    if (kind == "square") return std::abs(dx) <= size && std::abs(dy) <= size;
    // Upward triangle inscribed in a circle of radius `size`.
    const double top = cy - size, bottom = cy + 0.5 * size;
    if (y < top || y > bottom) return false;
    const double half = (y - top) / (bottom - top) * size * std::sqrt(3.0) / 2.0;
    return std::abs(dx) <= half;
  }
};

std::uint8_t quantize(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double vx = bx - ax, vy = by - ay;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? ((px - ax) * vx + (py - ay) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double qx = ax + t * vx - px, qy = ay + t * vy - py;
  return std::sqrt(qx * qx + qy * qy);
}

}  // namespace

std::string to_string(DefectKind kind) {
  switch (kind) {
    case DefectKind::none: return "none";
    case DefectKind::block: return "block";
    case DefectKind::scratch: return "scratch";
  }
  return "none";
}

namespace {

DefectKind defect_from_string(const std::string& s) {
  if (s == "none" || s == "good") return DefectKind::none;
  if (s == "block") return DefectKind::block;
  if (s == "scratch") return DefectKind::scratch;
  throw user_error("unknown defect kind '" + s + "'");
}

}  // namespace

void SynthOptions::validate() const {
  if (n_train < 1 || n_test_normal < 1 || n_test_anomalous < 1) {
    throw user_error("synthetic dataset counts must all be >= 1");
  }
  if (resolution.height < 32 || resolution.width < 32) throw user_error("synthetic resolution must be at least 32x32");
  if (categories.empty()) throw user_error("synthetic dataset needs at least one category");
  for (const auto& c : categories) {
    if (std::find(kKnownShapes.begin(), kKnownShapes.end(), c) == kKnownShapes.end()) {
      throw user_error("unknown synthetic shape category '" + c + "' (expected circle, square or triangle)");
    }
  }
  if (!(min_defect_frac > 0 && min_defect_frac <= max_defect_frac && max_defect_frac < 1)) {
    throw user_error("defect fraction bounds must satisfy 0 < min <= max < 1");
  }
}

SynthSample render_synthetic_sample(const SynthOptions& options, const std::string& shape,
                                    DefectKind defect, std::uint64_t sample_seed) {
  const int H = options.resolution.height, W = options.resolution.width;
  const double side = std::min(H, W);
  Rng rng(sample_seed);

  SynthSample s;
  s.shape = shape;
  s.defect = defect;
  s.mask = Mask(H, W);

  const NamedColor& base = kPalette[rng.index(kPalette.size())];
  s.color = base.name;
  const std::array<double, 3> color{base.r + rng.uniform(-0.04, 0.04), base.g + rng.uniform(-0.04, 0.04),
                                    base.b + rng.uniform(-0.04, 0.04)};
  const double background = rng.uniform(0.76, 0.9);

  ShapeGeometry geom;
  geom.kind = shape;
  geom.cx = W / 2.0 + rng.uniform(-0.06, 0.06) * side;
  geom.cy = H / 2.0 + rng.uniform(-0.06, 0.06) * side;
  geom.size = (shape == "triangle" ? rng.uniform(0.3, 0.38) : shape == "square" ? rng.uniform(0.2, 0.27)
                                                                                  : rng.uniform(0.22, 0.3)) *
              side;

  s.rgb.assign(static_cast<std::size_t>(H) * W * 3, 0);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const bool inside = geom.contains(x + 0.5, y + 0.5);
      for (int c = 0; c < 3; ++c) {
        s.rgb[(static_cast<std::size_t>(y) * W + x) * 3 + c] = quantize(inside ? color[c] : background);
      }
    }
  }
  if (defect == DefectKind::none) return s;

  const double luminance = 0.299 * color[0] + 0.587 * color[1] + 0.114 * color[2];
  const double shade = luminance > 0.5 ? rng.uniform(0.04, 0.16) : rng.uniform(0.9, 0.98);
  const std::array<double, 3> defect_color{shade, shade * rng.uniform(0.85, 1.0), shade * rng.uniform(0.85, 1.0)};

  const double total = static_cast<double>(H) * W;
  for (int attempt = 0; attempt < 1000; ++attempt) {
    double dx = 0, dy = 0;
    do {
      dx = rng.uniform(geom.cx - geom.size, geom.cx + geom.size);
      dy = rng.uniform(geom.cy - geom.size, geom.cy + geom.size);
    } while (!geom.contains(dx, dy));

    Mask m(H, W);
    if (defect == DefectKind::block) {
      const double bw = rng.uniform(0.08, 0.18) * side, bh = rng.uniform(0.08, 0.18) * side;
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
          if (std::abs(x + 0.5 - dx) <= bw / 2 && std::abs(y + 0.5 - dy) <= bh / 2) m.at(y, x) = 1;
    } else {
      const double len = rng.uniform(0.3, 0.5) * side;
      const double angle = rng.uniform(0.0, std::numbers::pi);
      const double thickness = rng.uniform(1.2, 2.2);
      const double ax = dx - std::cos(angle) * len / 2, ay = dy - std::sin(angle) * len / 2;
      const double bx = dx + std::cos(angle) * len / 2, by = dy + std::sin(angle) * len / 2;
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
          if (segment_distance(x + 0.5, y + 0.5, ax, ay, bx, by) <= thickness / 2) m.at(y, x) = 1;
    }
    const double frac = static_cast<double>(m.count_nonzero()) / total;
    if (frac < options.min_defect_frac || frac > options.max_defect_frac) continue;

    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        if (m.at(y, x))
          for (int c = 0; c < 3; ++c)
            s.rgb[(static_cast<std::size_t>(y) * W + x) * 3 + c] = quantize(defect_color[c]);
    s.mask = std::move(m);
    return s;
  }
  throw user_error("cannot place a defect within the configured area fraction bounds");
}

const SynthEntry* SynthManifest::find(const std::string& key) const {
  for (const auto& e : entries)
    if (e.key == key) return &e;
  return nullptr;
}

SynthManifest plan_synthetic_dataset(const SynthOptions& options) {
  options.validate();
  SynthManifest plan;
  plan.options = options;
  const auto ncat = options.categories.size();
  std::map<std::string, int> counters;

  auto add = [&](const std::string& category, const std::string& dir, DefectKind defect) {
    const std::string counter_key = category + "/" + dir;
    const int n = counters[counter_key]++;
    char name[32];
    std::snprintf(name, sizeof(name), "%03d.png", n);
    SynthEntry e;
    e.key = category + "/" + dir + "/" + name;
    e.shape = category;
    e.defect = defect;
    e.sample_seed = derive_seed(options.seed, e.key);
    plan.entries.push_back(std::move(e));
  };

  for (int i = 0; i < options.n_train; ++i) add(options.categories[i % ncat], "train/good", DefectKind::none);
  for (int i = 0; i < options.n_test_normal; ++i) add(options.categories[i % ncat], "test/good", DefectKind::none);
  for (int i = 0; i < options.n_test_anomalous; ++i) {
    const auto defect = (i / ncat) % 2 == 0 ? DefectKind::block : DefectKind::scratch;
    add(options.categories[i % ncat], "test/" + to_string(defect), defect);
  }
  return plan;
}

namespace {

std::string manifest_text(const SynthManifest& m) {
  const auto& o = m.options;
  std::ostringstream out;
  out.precision(17);
  out << "vlmdiff-synthetic 1\n";
  out << "seed " << o.seed << "\n";
  out << "n_train " << o.n_train << "\n";
  out << "n_test_normal " << o.n_test_normal << "\n";
  out << "n_test_anomalous " << o.n_test_anomalous << "\n";
  out << "resolution " << o.resolution.height << " " << o.resolution.width << "\n";
  out << "categories";
  for (const auto& c : o.categories) out << " " << c;
  out << "\n";
  out << "min_defect_frac " << o.min_defect_frac << "\n";
  out << "max_defect_frac " << o.max_defect_frac << "\n";
  for (const auto& e : m.entries) {
    out << "image " << e.key << " " << e.shape << " " << e.color << " " << to_string(e.defect) << " "
        << e.sample_seed << "\n";
  }
  return out.str();
}

}  // namespace

DatasetIndex synthesize_shapes_dataset(const SynthOptions& options, const fs::path& root) {
  SynthManifest plan = plan_synthetic_dataset(options);
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) throw io_error("cannot create dataset directory " + root.string() + ": " + ec.message());

  for (auto& e : plan.entries) {
    SynthSample s = render_synthetic_sample(options, e.shape, e.defect, e.sample_seed);
    e.color = s.color;
    const fs::path image_path = root / e.key;
    save_rgb8_png(image_path, options.resolution.height, options.resolution.width, s.rgb);
    if (e.defect != DefectKind::none) {
      const fs::path mask_path =
          root / e.shape / "ground_truth" / to_string(e.defect) / (image_path.stem().string() + "_mask.png");
      save_mask_png(mask_path, s.mask);
    }
  }
  write_file_atomic(root / "manifest", manifest_text(plan));
  return scan_industrial_layout(root, options.resolution);
}

std::optional<SynthManifest> read_synthetic_manifest(const fs::path& root) {
  const fs::path path = root / "manifest";
  if (!fs::is_regular_file(path)) return std::nullopt;
  std::istringstream in(read_file(path));
  SynthManifest m;
  std::string line;
  if (!std::getline(in, line) || line.rfind("vlmdiff-synthetic", 0) != 0) {
    throw io_error("not a synthetic dataset manifest: " + path.string());
  }
  auto& o = m.options;
  o.categories.clear();
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "seed") ls >> o.seed;
    else if (key == "n_train") ls >> o.n_train;
    else if (key == "n_test_normal") ls >> o.n_test_normal;
    else if (key == "n_test_anomalous") ls >> o.n_test_anomalous;
    else if (key == "resolution") ls >> o.resolution.height >> o.resolution.width;
    else if (key == "categories") {
      std::string c;
      while (ls >> c) o.categories.push_back(c);
      if (o.categories.empty()) throw io_error("manifest lists no categories: " + path.string());
      continue;
    } else if (key == "min_defect_frac") ls >> o.min_defect_frac;
    else if (key == "max_defect_frac") ls >> o.max_defect_frac;
    else if (key == "image") {
      SynthEntry e;
      std::string defect;
      ls >> e.key >> e.shape >> e.color >> defect >> e.sample_seed;
      e.defect = defect_from_string(defect);
      m.entries.push_back(std::move(e));
    }
    if (ls.fail()) throw io_error("malformed manifest line in " + path.string() + ": " + line);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

Image load_record_image(const DatasetIndex& index, std::size_t id) {
  if (id >= index.records.size()) throw user_error("record id out of range: " + std::to_string(id));
  return load_image(index.records[id].path, index.resolution);
}

Mask load_record_mask(const DatasetIndex& index, std::size_t id) {
  if (id >= index.records.size()) throw user_error("record id out of range: " + std::to_string(id));
  const auto& r = index.records[id];
  if (!r.mask_path) return Mask(index.resolution.height, index.resolution.width);
  return load_mask(*r.mask_path, index.resolution);
}

Batch load_batch(const DatasetIndex& index, std::span<const std::size_t> ids) {
  Batch b;
  b.size = static_cast<int>(ids.size());
  b.resolution = index.resolution;
  const std::size_t per = index.resolution.pixels() * 3;
  b.data.resize(per * ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const Image img = load_record_image(index, ids[i]);
    std::copy(img.data.begin(), img.data.end(), b.data.begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return b;
}

}  // namespace vlmdiff
