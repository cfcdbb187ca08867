#include "uar/data.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "uar/errors.hpp"
#include "uar/image_io.hpp"

namespace uar::data {

namespace fs = std::filesystem;
using nlohmann::json;

const std::vector<SyntheticFindingSpec>& default_findings() {
  static const std::vector<SyntheticFindingSpec> specs = {
      {0, "opacity", 0, 0, Shape::kGaussian, 0.45, "opacity seen in left upper zone",
       "no opacity in left upper zone"},
      {1, "consolidation", 3, 3, Shape::kTextured, 0.40, "consolidation seen in right lower zone",
       "no consolidation in right lower zone"},
      {2, "cardiomegaly", 2, 1, Shape::kEllipse, 0.30, "cardiomegaly seen with enlarged heart",
       "no cardiomegaly with normal heart"},
      {3, "device", 0, 3, Shape::kLine, 0.60, "device seen in right upper zone",
       "no device in right upper zone"},
      {4, "effusion", 3, 0, Shape::kMeniscus, 0.40, "effusion seen at left base", "no effusion at left base"},
      {5, "nodule", 1, 2, Shape::kDot, 0.60, "nodule seen in right mid zone", "no nodule in right mid zone"},
      {6, "pneumothorax", 0, 1, Shape::kDark, -0.25, "pneumothorax seen at left apex",
       "no pneumothorax at left apex"},
      {7, "atelectasis", 2, 3, Shape::kBand, 0.45, "atelectasis seen near right hilum",
       "no atelectasis near right hilum"},
  };
  return specs;
}

void SyntheticOptions::validate() const {
  if (n < 10) throw ConfigError("synthetic corpus needs n >= 10 (got " + std::to_string(n) + ")");
  if (k_findings < 1 || k_findings > kMaxFindings) {
    throw ConfigError("k_findings must be in [1, 8] (got " + std::to_string(k_findings) + ")");
  }
}

std::vector<const Record*> DatasetManifest::split(const std::string& name) const {
  std::vector<const Record*> out;
  for (const Record& r : records) {
    if (r.split == name) out.push_back(&r);
  }
  return out;
}

std::string DatasetManifest::image_path(const std::string& p) const {
  const fs::path path(p);
  if (path.is_absolute() || root.empty()) return p;
  return (fs::path(root) / path).string();
}

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t index, std::uint64_t stream) {
  return splitmix(splitmix(splitmix(seed) ^ index) ^ (stream * 0x632BE59BD9B4E019ULL));
}

void draw_finding(ImageTensor& img, const SyntheticFindingSpec& f, const PixelRect& cell, double gain,
                  std::mt19937_64& rng) {
  std::uniform_real_distribution<double> jitter(-3.0, 3.0);
  const double cy = 0.5 * (cell.y0 + cell.y1) + jitter(rng);
  const double cx = 0.5 * (cell.x0 + cell.x1) + jitter(rng);
  const double amp = f.amplitude * gain;
  // Every shape stays within 12.5 px of its center, so with a 3 px jitter it
  // never leaves the 32 px cell.
  for (int y = cell.y0; y < cell.y1; ++y) {
    for (int x = cell.x0; x < cell.x1; ++x) {
      const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
      const double r2 = dy * dy + dx * dx;
      double w = 0.0;
      switch (f.shape) {
        case Shape::kGaussian:
          if (r2 < 144.0) w = std::exp(-r2 / 50.0);
          break;
        case Shape::kTextured:
          if (r2 < 121.0) w = 0.65 + 0.35 * std::sin(0.9 * x) * std::sin(0.9 * y);
          break;
        case Shape::kEllipse:
          if (dy * dy / 81.0 + dx * dx / 144.0 < 1.0) w = 1.0;
          break;
        case Shape::kLine:
          if (std::abs(dy - dx) < 1.5 && std::abs(dx) < 10.0) w = 1.0;
          break;
        case Shape::kMeniscus:
          if (std::abs(dx) < 12.0 && dy < 12.0 && dy > -4.0 + 0.03 * dx * dx) w = 1.0;
          break;
        case Shape::kDot:
          if (r2 < 20.0) w = 1.0;
          break;
        case Shape::kDark:
          if (r2 < 121.0) w = 1.0;
          break;
        case Shape::kBand:
          if (std::abs(dy) < 3.0 && std::abs(dx) < 12.0) w = 1.0;
          break;
      }
      if (w != 0.0) img.at(y, x) += amp * w;
    }
  }
}

}  // namespace

PixelRect finding_cell(int finding, int view) {
  const auto& specs = default_findings();
  if (finding < 0 || finding >= static_cast<int>(specs.size())) throw IndexError("finding id out of range");
  const int cell = kNativeSize / kGrid;
  const int row = specs[static_cast<size_t>(finding)].grid_row;
  int col = specs[static_cast<size_t>(finding)].grid_col;
  if (view == 1) col = kGrid - 1 - col;  // lateral projection mirrors the columns
  return PixelRect{row * cell, (row + 1) * cell, col * cell, (col + 1) * cell};
}

ImageTensor render_view(std::uint64_t seed, int index, int view, const std::vector<bool>& present) {
  const int n = kNativeSize;
  ImageTensor img(n, n, 1, 0.08);
  std::mt19937_64 rng(stream_seed(seed, static_cast<std::uint64_t>(index), 100 + view));
  std::uniform_real_distribution<double> shift(-3.0, 3.0);
  std::uniform_real_distribution<double> bright(0.9, 1.1);
  std::normal_distribution<double> noise(0.0, 0.02);
  const double sy = shift(rng), sx = shift(rng), b = bright(rng);

  auto inside = [](double dy, double dx, double ry, double rx) {
    return dy * dy / (ry * ry) + dx * dx / (rx * rx) < 1.0;
  };
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const double py = y + 0.5 - sy, px = x + 0.5 - sx;
      double v = 0.08;
      if (inside(py - 66, px - 64, 60, 58)) v = 0.45;
      if (view == 0) {
        if (inside(py - 60, px - 38, 44, 22) || inside(py - 60, px - 90, 44, 22)) v = 0.22;
      } else {
        if (inside(py - 60, px - 62, 42, 38)) v = 0.24;
      }
      v += 0.03 * std::sin(py * 0.45);  // rib-like banding
      img.at(y, x) = b * v + noise(rng);
    }
  }

  const auto& specs = default_findings();
  const double gain = view == 0 ? 1.0 : 0.8;
  for (size_t f = 0; f < present.size(); ++f) {
    if (!present[f]) continue;
    std::mt19937_64 frng(stream_seed(seed, static_cast<std::uint64_t>(index), 200 + 10 * f + view));
    draw_finding(img, specs[f], finding_cell(static_cast<int>(f), view), gain, frng);
  }
  // Quantize to the 8-bit levels the PNG files store, so in-memory and on-disk corpora agree.
  for (double& v : img.values) v = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
  return img;
}

std::string compose_report(const std::vector<bool>& present) {
  const auto& specs = default_findings();
  if (present.size() > specs.size()) throw ConfigError("compose_report: too many findings");
  std::string out;
  for (size_t f = 0; f < present.size(); ++f) {
    if (!out.empty()) out += " ";
    out += present[f] ? specs[f].present : specs[f].absent;
    out += ".";
  }
  return out;
}

std::vector<bool> parse_report(const std::string& report, int k_findings) {
  const auto& specs = default_findings();
  if (k_findings < 1 || k_findings > static_cast<int>(specs.size())) {
    throw ConfigError("parse_report: k_findings out of range");
  }
  std::vector<std::string> sentences;
  std::string cur;
  for (char c : report) {
    if (c == '.') {
      sentences.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (cur.find_first_not_of(" \t\n") != std::string::npos) sentences.push_back(cur);
  if (static_cast<int>(sentences.size()) != k_findings) {
    throw ParseError("parse_report: expected " + std::to_string(k_findings) + " sentences");
  }
  std::vector<bool> present(static_cast<size_t>(k_findings));
  for (int f = 0; f < k_findings; ++f) {
    const auto words = lsu::tokenize(sentences[static_cast<size_t>(f)]);
    const auto& s = specs[static_cast<size_t>(f)];
    if (words == lsu::tokenize(s.present)) {
      present[static_cast<size_t>(f)] = true;
    } else if (words == lsu::tokenize(s.absent)) {
      present[static_cast<size_t>(f)] = false;
    } else {
      throw ParseError("parse_report: sentence " + std::to_string(f) + " matches no template");
    }
  }
  return present;
}

std::vector<std::string> assign_splits(int n, std::uint64_t seed, double train, double val) {
  if (n < 0 || train < 0.0 || val < 0.0 || train + val > 1.0) throw ConfigError("assign_splits: bad ratios");
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(stream_seed(seed, 0, 7));
  // Fisher-Yates with an explicit draw so the permutation does not depend on
  // the standard library's shuffle implementation.
  for (int i = n - 1; i > 0; --i) {
    const int j = static_cast<int>(rng() % static_cast<std::uint64_t>(i + 1));
    std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
  }
  const int n_train = static_cast<int>(std::lround(train * n));
  const int n_val = std::min(n - n_train, static_cast<int>(std::lround(val * n)));
  std::vector<std::string> split(static_cast<size_t>(n));
  for (int r = 0; r < n; ++r) {
    split[static_cast<size_t>(order[static_cast<size_t>(r)])] =
        r < n_train ? "train" : (r < n_train + n_val ? "val" : "test");
  }
  return split;
}

SyntheticCorpus generate_synthetic(const SyntheticOptions& options) {
  options.validate();
  SyntheticCorpus corpus;
  corpus.options = options;
  const auto splits = assign_splits(options.n, options.seed);
  for (int i = 0; i < options.n; ++i) {
    std::mt19937_64 rng(stream_seed(options.seed, static_cast<std::uint64_t>(i), 1));
    SyntheticSample s;
    char id[32];
    std::snprintf(id, sizeof(id), "syn%05d", i);
    s.id = id;
    for (int f = 0; f < options.k_findings; ++f) s.present.push_back((rng() >> 11) & 1U);
    s.views.push_back(render_view(options.seed, i, 0, s.present));
    if (options.two_view) s.views.push_back(render_view(options.seed, i, 1, s.present));
    s.report = compose_report(s.present);
    s.split = splits[static_cast<size_t>(i)];

    Record r;
    r.id = s.id;
    for (size_t v = 0; v < s.views.size(); ++v) {
      r.images.push_back("images/" + s.id + (v == 0 ? "_frontal.png" : "_lateral.png"));
    }
    r.report = s.report;
    r.split = s.split;
    for (int f = 0; f < options.k_findings; ++f) {
      if (s.present[static_cast<size_t>(f)]) r.findings.push_back(f);
    }
    corpus.manifest.records.push_back(std::move(r));
    corpus.samples.push_back(std::move(s));
  }
  return corpus;
}

void write_corpus(const SyntheticCorpus& corpus, const std::string& dir) {
  std::error_code ec;
  fs::create_directories(fs::path(dir) / "images", ec);
  if (ec) throw ConfigError("cannot create output directory " + dir + ": " + ec.message());
  for (size_t i = 0; i < corpus.samples.size(); ++i) {
    const auto& rec = corpus.manifest.records[i];
    for (size_t v = 0; v < rec.images.size(); ++v) {
      io::write_png_gray((fs::path(dir) / rec.images[v]).string(), corpus.samples[i].views[v]);
    }
  }
  DatasetManifest m = corpus.manifest;
  m.root = dir;
  save_manifest(m, (fs::path(dir) / "manifest.json").string());
}

namespace {

Record parse_record(const json& j, const std::string& default_split) {
  if (!j.is_object()) throw ParseError("manifest: record must be an object");
  Record r;
  try {
    r.id = j.at("id").is_string() ? j.at("id").get<std::string>() : j.at("id").dump();
    r.report = j.at("report").get<std::string>();
    const json* imgs = nullptr;
    if (j.contains("images")) imgs = &j.at("images");
    else if (j.contains("image_path")) imgs = &j.at("image_path");
    if (imgs == nullptr) throw ParseError("manifest: record " + r.id + " has no images");
    if (imgs->is_string()) {
      r.images.push_back(imgs->get<std::string>());
    } else {
      for (const auto& p : *imgs) r.images.push_back(p.get<std::string>());
    }
    r.split = j.contains("split") ? j.at("split").get<std::string>() : default_split;
    if (j.contains("findings")) r.findings = j.at("findings").get<std::vector<int>>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("manifest: malformed record: ") + e.what());
  }
  if (r.images.empty()) throw ParseError("manifest: record " + r.id + " lists no images");
  if (r.split != "train" && r.split != "val" && r.split != "test") {
    throw ParseError("manifest: record " + r.id + " has unknown split '" + r.split + "'");
  }
  return r;
}

}  // namespace

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MissingFile("manifest not found: " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError("manifest: invalid JSON in " + path + ": " + e.what());
  }
  DatasetManifest m;
  m.root = fs::path(path).parent_path().string();
  if (j.is_array()) {
    for (const auto& rec : j) m.records.push_back(parse_record(rec, ""));
  } else if (j.is_object()) {
    for (const char* split : {"train", "val", "test"}) {
      if (!j.contains(split)) continue;
      if (!j.at(split).is_array()) throw ParseError(std::string("manifest: '") + split + "' must be a list");
      for (const auto& rec : j.at(split)) m.records.push_back(parse_record(rec, split));
    }
  } else {
    throw ParseError("manifest: top level must be a list or an object of splits");
  }
  std::vector<std::string> missing;
  for (const Record& r : m.records) {
    for (const auto& p : r.images) {
      const std::string full = m.image_path(p);
      if (!fs::exists(full)) missing.push_back(full);
    }
  }
  if (!missing.empty()) {
    std::string msg = "manifest references missing images:";
    for (const auto& p : missing) msg += " " + p;
    throw MissingFile(msg);
  }
  return m;
}

void save_manifest(const DatasetManifest& manifest, const std::string& path) {
  json arr = json::array();
  for (const Record& r : manifest.records) {
    json o = {{"id", r.id}, {"images", r.images}, {"report", r.report}, {"split", r.split}};
    if (!r.findings.empty()) o["findings"] = r.findings;
    arr.push_back(std::move(o));
  }
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write manifest: " + path);
  out << arr.dump(1) << "\n";
}

// ---- preprocessing ----------------------------------------------------------

void PreprocessSpec::validate() const {
  if (resize <= 0 || crop <= 0 || infer_size <= 0) throw ConfigError("preprocess: sizes must be positive");
  if (crop > resize) throw ConfigError("preprocess: crop larger than resize");
}

ImageTensor resize_bilinear(const ImageTensor& image, int height, int width) {
  image.validate();
  if (height <= 0 || width <= 0) throw ShapeError("resize_bilinear: target size must be positive");
  if (height == image.height && width == image.width) return image;
  ImageTensor out(height, width, image.channels);
  const double fy = static_cast<double>(image.height) / height;
  const double fx = static_cast<double>(image.width) / width;
  for (int y = 0; y < height; ++y) {
    const double sy = std::clamp((y + 0.5) * fy - 0.5, 0.0, image.height - 1.0);
    const int y0 = static_cast<int>(sy);
    const int y1 = std::min(y0 + 1, image.height - 1);
    const double wy = sy - y0;
    for (int x = 0; x < width; ++x) {
      const double sx = std::clamp((x + 0.5) * fx - 0.5, 0.0, image.width - 1.0);
      const int x0 = static_cast<int>(sx);
      const int x1 = std::min(x0 + 1, image.width - 1);
      const double wx = sx - x0;
      for (int c = 0; c < image.channels; ++c) {
        const double top = (1 - wx) * image.at(y0, x0, c) + wx * image.at(y0, x1, c);
        const double bot = (1 - wx) * image.at(y1, x0, c) + wx * image.at(y1, x1, c);
        out.at(y, x, c) = (1 - wy) * top + wy * bot;
      }
    }
  }
  return out;
}

ImageTensor preprocess(const ImageTensor& image, const PreprocessSpec& spec, Mode mode, std::uint64_t seed,
                       CropOffset* offset) {
  spec.validate();
  if (mode == Mode::kInfer) {
    if (offset != nullptr) *offset = CropOffset{};
    return resize_bilinear(image, spec.infer_size, spec.infer_size);
  }
  const ImageTensor resized = resize_bilinear(image, spec.resize, spec.resize);
  std::mt19937_64 rng(stream_seed(seed, 0, 11));
  const auto span = static_cast<std::uint64_t>(spec.resize - spec.crop + 1);
  const CropOffset o{static_cast<int>(rng() % span), static_cast<int>(rng() % span)};
  if (offset != nullptr) *offset = o;
  ImageTensor out(spec.crop, spec.crop, image.channels);
  for (int y = 0; y < spec.crop; ++y) {
    for (int x = 0; x < spec.crop; ++x) {
      for (int c = 0; c < image.channels; ++c) out.at(y, x, c) = resized.at(o.y + y, o.x + x, c);
    }
  }
  return out;
}

std::vector<int> region_tokens(int finding, int image_size, int downsample, int view) {
  if (downsample <= 0 || image_size % downsample != 0) throw ShapeError("region_tokens: bad grid");
  const PixelRect cell = finding_cell(finding, view);
  const int g = image_size / downsample;
  const double s = static_cast<double>(kNativeSize) / image_size;
  std::vector<int> out;
  for (int gy = 0; gy < g; ++gy) {
    for (int gx = 0; gx < g; ++gx) {
      // patch center mapped back to native pixel coordinates
      const double cy = (gy + 0.5) * downsample * s;
      const double cx = (gx + 0.5) * downsample * s;
      if (cy >= cell.y0 && cy < cell.y1 && cx >= cell.x0 && cx < cell.x1) {
        out.push_back(view * g * g + gy * g + gx);
      }
    }
  }
  return out;
}

}  // namespace uar::data
