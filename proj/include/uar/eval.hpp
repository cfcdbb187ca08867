#pragma once

// Caption metrics with COCO-evaluation semantics and the analysis probes:
// retrieval ranking, similarity heatmaps, Gram export, attention heatmaps.

#include <array>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "uar/autograd.hpp"
#include "uar/lsu.hpp"
#include "uar/tir.hpp"

namespace uar::eval {

using Sentence = std::vector<std::string>;
using NGram = std::vector<std::string>;

struct NGramStats {
  // counts[n-1] holds the n-gram multiset of one sentence.
  std::array<std::map<NGram, int>, 4> counts;
};

NGramStats ngram_stats(const Sentence& s, int max_n = 4);
// Number of samples whose reference set contains each n-gram.
std::map<NGram, int> document_frequency(const std::vector<std::vector<Sentence>>& references, int max_n = 4);

// Candidates and references are tokenized with the vocabulary tokenizer.
// Each candidate may have several references.
std::array<double, 4> bleu(std::span<const std::string> candidates,
                           std::span<const std::vector<std::string>> references, int max_n = 4);
std::array<double, 4> bleu(std::span<const std::string> candidates, std::span<const std::string> references,
                           int max_n = 4);
double rouge_l(std::span<const std::string> candidates, std::span<const std::vector<std::string>> references);
double rouge_l(std::span<const std::string> candidates, std::span<const std::string> references);
double cider(std::span<const std::string> candidates, std::span<const std::vector<std::string>> references);
double cider(std::span<const std::string> candidates, std::span<const std::string> references);

struct MetricReport {
  std::array<double, 4> bleu{};
  double rouge_l = 0.0;
  double cider = 0.0;

  nlohmann::json to_json() const;
  static MetricReport from_json(const nlohmann::json& j);
};

MetricReport evaluate(std::span<const std::string> candidates, std::span<const std::string> references);

// ---- retrieval ----------------------------------------------------------------

struct RankedCandidate {
  int index = 0;
  double similarity = 0.0;
};

struct RetrievalResult {
  int query = 0;
  std::vector<RankedCandidate> ranking;  // similarity non-increasing, ties by index
  int ground_truth_rank = 0;             // 1-based
};

struct RetrievalReport {
  std::vector<RetrievalResult> image_to_report;
  std::vector<RetrievalResult> report_to_image;
  std::array<double, 3> recall_image_to_report{};  // R@1, R@5, R@10
  std::array<double, 3> recall_report_to_image{};

  nlohmann::json to_json(bool include_rankings = false) const;
};

// Row i of image and report are a ground-truth pair of unit-norm features.
RetrievalReport retrieval_probe(const Matrix& image, const Matrix& report);

// ---- matrices and heatmaps ------------------------------------------------------

// Pairwise cosine similarities of the rows of features.
Matrix similarity_heatmap(const Matrix& features);
// Cosine similarities between rows of a and rows of b.
Matrix cross_similarity(const Matrix& a, const Matrix& b);
// M^T M
Matrix gram_matrix(const Matrix& m);

void write_csv(const Matrix& m, const std::string& path);
// Colors each entry by its position in [lo, hi]; scale is the pixel size of one entry.
void write_heatmap_png(const Matrix& m, const std::string& path, double lo, double hi, int scale = 1);

// Writes <base>.csv and <base>.png and returns the matrix.
Matrix similarity_heatmap(const Matrix& features, const std::string& base);
Matrix gram_export(const Matrix& m, const std::string& base);

// ---- attention heatmaps -----------------------------------------------------------

struct ImageLayout {
  int height = 112;
  int width = 112;
  int downsample = 8;
  int views = 1;

  int grid_h() const { return height / downsample; }
  int grid_w() const { return width / downsample; }
  int tokens() const { return views * grid_h() * grid_w(); }
};

// One attention row reshaped to (views * grid_h) x grid_w.
Matrix attention_grid(std::span<const double> row, const ImageLayout& layout);
// Row upsampled to image resolution by repeating each grid cell (views stacked vertically).
Matrix upsample_grid(const Matrix& grid, int downsample);
// Sum of row weights over the given token indices.
double attention_mass(std::span<const double> row, std::span<const int> tokens);

struct AttentionExport {
  std::vector<Matrix> grids;        // one per selected word
  std::vector<std::string> files;   // PNG path per word, then the JSON sidecar
};

// weights: T x L from the final decoder layer. Throws IndexError for a word
// index outside [0, T) and ShapeError when a row does not sum to one.
AttentionExport attention_heatmap_export(const tir::DecoderOutput& out, std::span<const int> words,
                                         std::span<const std::string> labels, const ImageTensor& background,
                                         const ImageLayout& layout, const std::string& dir,
                                         const std::string& prefix);

}  // namespace uar::eval
