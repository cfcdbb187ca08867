#pragma once

// Synthetic paired image/report corpus, manifest IO and image preprocessing.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "uar/lsu.hpp"

namespace uar::data {

inline constexpr int kGrid = 4;
inline constexpr int kNativeSize = 128;
inline constexpr int kMaxFindings = 8;

enum class Shape { kGaussian, kTextured, kEllipse, kLine, kMeniscus, kDot, kDark, kBand };

struct SyntheticFindingSpec {
  int id = 0;
  std::string keyword;
  int grid_row = 0;  // cell in the 4x4 layout of the frontal view
  int grid_col = 0;
  Shape shape = Shape::kGaussian;
  double amplitude = 0.0;  // added intensity (negative darkens)
  std::string present;
  std::string absent;
};

const std::vector<SyntheticFindingSpec>& default_findings();

struct SyntheticOptions {
  int n = 2000;
  int k_findings = 4;
  std::uint64_t seed = 0;
  bool two_view = false;

  void validate() const;
};

struct Record {
  std::string id;
  std::vector<std::string> images;  // relative to the manifest directory unless absolute
  std::string report;
  std::string split;                // train | val | test
  std::vector<int> findings;        // present finding ids (synthetic corpora only)
};

struct DatasetManifest {
  std::vector<Record> records;
  std::string root;  // directory that relative image paths resolve against

  std::vector<const Record*> split(const std::string& name) const;
  std::string image_path(const std::string& p) const;
};

struct SyntheticSample {
  std::string id;
  std::vector<bool> present;     // one flag per finding in use
  std::vector<ImageTensor> views;  // frontal [, lateral]
  std::string report;
  std::string split;
};

struct SyntheticCorpus {
  SyntheticOptions options;
  std::vector<SyntheticSample> samples;
  DatasetManifest manifest;  // image paths under images/
};

// Fully determined by (seed, index); throws ConfigError on invalid options.
SyntheticCorpus generate_synthetic(const SyntheticOptions& options);
// Renders one view (0 frontal, 1 lateral) of a sample.
ImageTensor render_view(std::uint64_t seed, int index, int view, const std::vector<bool>& present);
std::string compose_report(const std::vector<bool>& present);
// Inverse of compose_report for k findings; throws ParseError on text outside the grammar.
std::vector<bool> parse_report(const std::string& report, int k_findings);

// Writes images/*.png and manifest.json under dir; throws ConfigError if dir is not writable.
void write_corpus(const SyntheticCorpus& corpus, const std::string& dir);

// 70/10/20 by seeded shuffle (train/val sizes rounded, test takes the rest).
std::vector<std::string> assign_splits(int n, std::uint64_t seed, double train = 0.7, double val = 0.1);

// Accepts a list of records or an object of per-split arrays; image lists may
// be under "images" or "image_path". Throws ParseError or MissingFile.
DatasetManifest load_manifest(const std::string& path);
void save_manifest(const DatasetManifest& manifest, const std::string& path);

// ---- preprocessing ----------------------------------------------------------

struct PreprocessSpec {
  int resize = 128;
  int crop = 112;
  int infer_size = 112;

  void validate() const;
};

enum class Mode { kTrain, kInfer };

struct CropOffset {
  int y = 0;
  int x = 0;
};

// Bilinear with half-pixel centers and edge clamping.
ImageTensor resize_bilinear(const ImageTensor& image, int height, int width);
ImageTensor preprocess(const ImageTensor& image, const PreprocessSpec& spec, Mode mode,
                       std::uint64_t seed, CropOffset* offset = nullptr);

// ---- region oracle ----------------------------------------------------------

// Pixel rectangle [y0, y1) x [x0, x1) of a finding's cell in a native 128x128 view.
struct PixelRect {
  int y0 = 0, y1 = 0, x0 = 0, x1 = 0;
};
PixelRect finding_cell(int finding, int view);

// Visual-token indices whose patch centers fall inside the finding's cell once
// the view is resized to image_size (inference mode). Lateral tokens are
// offset by one view's token count.
std::vector<int> region_tokens(int finding, int image_size, int downsample, int view = 0);

}  // namespace uar::data
