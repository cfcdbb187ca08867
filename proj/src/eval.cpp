#include "uar/eval.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>

#include "uar/cra.hpp"
#include "uar/errors.hpp"
#include "uar/image_io.hpp"

namespace uar::eval {

using nlohmann::json;

NGramStats ngram_stats(const Sentence& s, int max_n) {
  if (max_n < 1 || max_n > 4) throw ConfigError("ngram_stats: max_n must be in [1, 4]");
  NGramStats st;
  for (int n = 1; n <= max_n; ++n) {
    for (size_t i = 0; i + static_cast<size_t>(n) <= s.size(); ++i) {
      ++st.counts[static_cast<size_t>(n - 1)][NGram(s.begin() + static_cast<long>(i),
                                                    s.begin() + static_cast<long>(i) + n)];
    }
  }
  return st;
}

std::map<NGram, int> document_frequency(const std::vector<std::vector<Sentence>>& references, int max_n) {
  std::map<NGram, int> df;
  for (const auto& refs : references) {
    std::set<NGram> seen;
    for (const auto& r : refs) {
      const NGramStats st = ngram_stats(r, max_n);
      for (int n = 0; n < max_n; ++n) {
        for (const auto& kv : st.counts[static_cast<size_t>(n)]) seen.insert(kv.first);
      }
    }
    for (const auto& g : seen) ++df[g];
  }
  return df;
}

namespace {

std::vector<std::vector<Sentence>> tokenize_refs(std::span<const std::vector<std::string>> refs) {
  std::vector<std::vector<Sentence>> out;
  out.reserve(refs.size());
  for (const auto& rs : refs) {
    std::vector<Sentence> t;
    for (const auto& r : rs) t.push_back(lsu::tokenize(r));
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<std::vector<std::string>> wrap(std::span<const std::string> refs) {
  std::vector<std::vector<std::string>> out;
  for (const auto& r : refs) out.push_back({r});
  return out;
}

void check_corpus(size_t cands, size_t refs, const char* what) {
  if (cands == 0) throw EmptyCorpus(std::string(what) + ": empty corpus");
  if (cands != refs) throw ShapeError(std::string(what) + ": candidate and reference counts differ");
}

}  // namespace

std::array<double, 4> bleu(std::span<const std::string> candidates,
                           std::span<const std::vector<std::string>> references, int max_n) {
  check_corpus(candidates.size(), references.size(), "bleu");
  if (max_n < 1 || max_n > 4) throw ConfigError("bleu: max_n must be in [1, 4]");
  const auto refs = tokenize_refs(references);
  std::array<double, 4> matched{}, total{};
  double cand_len = 0.0, ref_len = 0.0;
  for (size_t i = 0; i < candidates.size(); ++i) {
    const Sentence c = lsu::tokenize(candidates[i]);
    if (refs[i].empty()) throw ShapeError("bleu: sample without reference");
    const NGramStats cs = ngram_stats(c, max_n);
    // Clip against the per-n-gram maximum over references.
    std::array<std::map<NGram, int>, 4> max_ref;
    size_t closest = refs[i][0].size();
    for (const auto& r : refs[i]) {
      const NGramStats rs = ngram_stats(r, max_n);
      for (int n = 0; n < max_n; ++n) {
        for (const auto& [g, cnt] : rs.counts[static_cast<size_t>(n)]) {
          int& m = max_ref[static_cast<size_t>(n)][g];
          m = std::max(m, cnt);
        }
      }
      const auto diff = [&](size_t len) { return std::abs(static_cast<long>(len) - static_cast<long>(c.size())); };
      if (diff(r.size()) < diff(closest) || (diff(r.size()) == diff(closest) && r.size() < closest)) {
        closest = r.size();
      }
    }
    for (int n = 0; n < max_n; ++n) {
      for (const auto& [g, cnt] : cs.counts[static_cast<size_t>(n)]) {
        auto it = max_ref[static_cast<size_t>(n)].find(g);
        if (it != max_ref[static_cast<size_t>(n)].end()) matched[static_cast<size_t>(n)] += std::min(cnt, it->second);
        total[static_cast<size_t>(n)] += cnt;
      }
    }
    cand_len += static_cast<double>(c.size());
    ref_len += static_cast<double>(closest);
  }
  std::array<double, 4> out{};
  if (cand_len == 0.0) return out;
  const double bp = cand_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
  double log_sum = 0.0;
  bool zero = false;
  for (int n = 0; n < max_n; ++n) {
    const auto k = static_cast<size_t>(n);
    if (matched[k] == 0.0 || total[k] == 0.0) zero = true;
    if (!zero) log_sum += std::log(matched[k] / total[k]);
    out[k] = zero ? 0.0 : bp * std::exp(log_sum / (n + 1));
  }
  return out;
}

std::array<double, 4> bleu(std::span<const std::string> candidates, std::span<const std::string> references,
                           int max_n) {
  const auto r = wrap(references);
  return bleu(candidates, r, max_n);
}

namespace {

size_t lcs_length(const Sentence& a, const Sentence& b) {
  std::vector<size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (size_t i = 1; i <= a.size(); ++i) {
    for (size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace

double rouge_l(std::span<const std::string> candidates, std::span<const std::vector<std::string>> references) {
  check_corpus(candidates.size(), references.size(), "rouge_l");
  constexpr double beta = 1.2;
  const auto refs = tokenize_refs(references);
  double sum = 0.0;
  for (size_t i = 0; i < candidates.size(); ++i) {
    const Sentence c = lsu::tokenize(candidates[i]);
    double p_max = 0.0, r_max = 0.0;
    for (const auto& r : refs[i]) {
      const double lcs = static_cast<double>(lcs_length(c, r));
      if (!c.empty()) p_max = std::max(p_max, lcs / static_cast<double>(c.size()));
      if (!r.empty()) r_max = std::max(r_max, lcs / static_cast<double>(r.size()));
    }
    if (p_max != 0.0 && r_max != 0.0) {
      sum += (1 + beta * beta) * p_max * r_max / (r_max + beta * beta * p_max);
    }
  }
  return sum / static_cast<double>(candidates.size());
}

double rouge_l(std::span<const std::string> candidates, std::span<const std::string> references) {
  const auto r = wrap(references);
  return rouge_l(candidates, r);
}

namespace {

struct TfIdf {
  std::array<std::map<NGram, double>, 4> vec;
  std::array<double, 4> norm{};
  int length = 0;  // bigram count, used by the length penalty
};

TfIdf tfidf(const Sentence& s, const std::map<NGram, int>& df, double log_n) {
  TfIdf t;
  const NGramStats st = ngram_stats(s, 4);
  for (int n = 0; n < 4; ++n) {
    for (const auto& [g, tf] : st.counts[static_cast<size_t>(n)]) {
      auto it = df.find(g);
      const double d = std::log(std::max(1.0, it == df.end() ? 0.0 : static_cast<double>(it->second)));
      const double w = tf * (log_n - d);
      t.vec[static_cast<size_t>(n)][g] = w;
      t.norm[static_cast<size_t>(n)] += w * w;
      if (n == 1) t.length += tf;
    }
  }
  for (double& v : t.norm) v = std::sqrt(v);
  return t;
}

}  // namespace

double cider(std::span<const std::string> candidates, std::span<const std::vector<std::string>> references) {
  check_corpus(candidates.size(), references.size(), "cider");
  if (candidates.size() < 2) throw EmptyCorpus("cider: document frequencies need at least 2 samples");
  constexpr double sigma = 6.0;
  const auto refs = tokenize_refs(references);
  const auto df = document_frequency(refs, 4);
  const double log_n = std::log(static_cast<double>(candidates.size()));
  double total = 0.0;
  for (size_t i = 0; i < candidates.size(); ++i) {
    const TfIdf h = tfidf(lsu::tokenize(candidates[i]), df, log_n);
    std::array<double, 4> score{};
    for (const auto& r : refs[i]) {
      const TfIdf rv = tfidf(r, df, log_n);
      const double delta = static_cast<double>(h.length - rv.length);
      const double penalty = std::exp(-(delta * delta) / (2 * sigma * sigma));
      for (size_t n = 0; n < 4; ++n) {
        double val = 0.0;
        for (const auto& [g, w] : h.vec[n]) {
          auto it = rv.vec[n].find(g);
          if (it != rv.vec[n].end()) val += std::min(w, it->second) * it->second;
        }
        if (h.norm[n] != 0.0 && rv.norm[n] != 0.0) val /= h.norm[n] * rv.norm[n];
        score[n] += val * penalty;
      }
    }
    const double mean = (score[0] + score[1] + score[2] + score[3]) / 4.0;
    total += mean / static_cast<double>(refs[i].size()) * 10.0;
  }
  return total / static_cast<double>(candidates.size());
}

double cider(std::span<const std::string> candidates, std::span<const std::string> references) {
  const auto r = wrap(references);
  return cider(candidates, r);
}

json MetricReport::to_json() const {
  return json{{"BLEU-1", bleu[0]}, {"BLEU-2", bleu[1]}, {"BLEU-3", bleu[2]},
              {"BLEU-4", bleu[3]}, {"ROUGE-L", rouge_l}, {"CIDEr", cider}};
}

MetricReport MetricReport::from_json(const json& j) {
  MetricReport m;
  try {
    for (int n = 0; n < 4; ++n) m.bleu[static_cast<size_t>(n)] = j.at("BLEU-" + std::to_string(n + 1)).get<double>();
    m.rouge_l = j.at("ROUGE-L").get<double>();
    m.cider = j.at("CIDEr").get<double>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("metric report: ") + e.what());
  }
  return m;
}

MetricReport evaluate(std::span<const std::string> candidates, std::span<const std::string> references) {
  MetricReport m;
  m.bleu = bleu(candidates, references);
  m.rouge_l = rouge_l(candidates, references);
  m.cider = candidates.size() >= 2 ? cider(candidates, references) : 0.0;
  return m;
}

// ---- retrieval ------------------------------------------------------------------

namespace {

std::span<const double> row_of(const Matrix& m, Index r) {
  return {m.data() + r * m.cols(), static_cast<size_t>(m.cols())};
}

std::vector<RetrievalResult> rank_all(const Matrix& queries, const Matrix& candidates) {
  std::vector<RetrievalResult> out;
  const Index n = queries.rows();
  for (Index q = 0; q < n; ++q) {
    RetrievalResult r;
    r.query = static_cast<int>(q);
    for (Index c = 0; c < candidates.rows(); ++c) {
      r.ranking.push_back({static_cast<int>(c), cra::dot(row_of(queries, q), row_of(candidates, c))});
    }
    std::stable_sort(r.ranking.begin(), r.ranking.end(),
                     [](const RankedCandidate& a, const RankedCandidate& b) { return a.similarity > b.similarity; });
    for (size_t k = 0; k < r.ranking.size(); ++k) {
      if (r.ranking[k].index == r.query) r.ground_truth_rank = static_cast<int>(k) + 1;
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::array<double, 3> recalls(const std::vector<RetrievalResult>& rs) {
  std::array<double, 3> out{};
  const int ks[3] = {1, 5, 10};
  for (const auto& r : rs) {
    for (int i = 0; i < 3; ++i) {
      if (r.ground_truth_rank <= ks[i]) out[static_cast<size_t>(i)] += 1.0;
    }
  }
  for (double& v : out) v /= static_cast<double>(rs.size());
  return out;
}

json results_json(const std::vector<RetrievalResult>& rs, bool rankings) {
  json arr = json::array();
  for (const auto& r : rs) {
    json o = {{"query", r.query}, {"ground_truth_rank", r.ground_truth_rank}};
    if (rankings) {
      json rk = json::array();
      for (const auto& c : r.ranking) rk.push_back({{"index", c.index}, {"similarity", c.similarity}});
      o["ranking"] = std::move(rk);
    }
    arr.push_back(std::move(o));
  }
  return arr;
}

}  // namespace

json RetrievalReport::to_json(bool include_rankings) const {
  return json{{"image_to_report",
               {{"R@1", recall_image_to_report[0]},
                {"R@5", recall_image_to_report[1]},
                {"R@10", recall_image_to_report[2]},
                {"queries", results_json(image_to_report, include_rankings)}}},
              {"report_to_image",
               {{"R@1", recall_report_to_image[0]},
                {"R@5", recall_report_to_image[1]},
                {"R@10", recall_report_to_image[2]},
                {"queries", results_json(report_to_image, include_rankings)}}}};
}

RetrievalReport retrieval_probe(const Matrix& image, const Matrix& report) {
  if (image.rows() != report.rows() || image.cols() != report.cols()) {
    throw ShapeError("retrieval_probe: image and report features must be paired");
  }
  if (image.rows() < 2) throw BatchTooSmall("retrieval_probe: need at least 2 pairs");
  RetrievalReport r;
  r.image_to_report = rank_all(image, report);
  r.report_to_image = rank_all(report, image);
  r.recall_image_to_report = recalls(r.image_to_report);
  r.recall_report_to_image = recalls(r.report_to_image);
  return r;
}

// ---- matrices ---------------------------------------------------------------

namespace {

Matrix normalized_rows(const Matrix& m) {
  Matrix out = m;
  for (Index i = 0; i < m.rows(); ++i) {
    const double n = m.row(i).norm();
    if (n < 1e-12) throw ZeroNorm("cosine similarity of a zero vector");
    out.row(i) /= n;
  }
  return out;
}

}  // namespace

Matrix cross_similarity(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw ShapeError("cross_similarity: width mismatch");
  const Matrix na = normalized_rows(a), nb = normalized_rows(b);
  Matrix s(a.rows(), b.rows());
  for (Index i = 0; i < a.rows(); ++i) {
    for (Index j = 0; j < b.rows(); ++j) s(i, j) = cra::dot(row_of(na, i), row_of(nb, j));
  }
  return s;
}

Matrix similarity_heatmap(const Matrix& features) {
  if (features.rows() < 2) throw BatchTooSmall("similarity_heatmap: need at least 2 samples");
  const Matrix n = normalized_rows(features);
  Matrix s(n.rows(), n.rows());
  for (Index i = 0; i < n.rows(); ++i) {
    for (Index j = i; j < n.rows(); ++j) {
      s(i, j) = s(j, i) = cra::dot(row_of(n, i), row_of(n, j));
    }
  }
  return s;
}

Matrix gram_matrix(const Matrix& m) {
  if (m.size() == 0) throw ShapeError("gram_matrix: empty matrix");
  return m.transpose() * m;
}

void write_csv(const Matrix& m, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path);
  out << std::setprecision(17);
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = 0; j < m.cols(); ++j) {
      if (j > 0) out << ',';
      out << m(i, j);
    }
    out << '\n';
  }
}

namespace {

// Dark blue -> white -> dark red.
std::array<std::uint8_t, 3> colormap(double t) {
  t = std::clamp(t, 0.0, 1.0);
  double r, g, b;
  if (t < 0.5) {
    const double u = t / 0.5;
    r = 0.1 + 0.9 * u;
    g = 0.2 + 0.8 * u;
    b = 0.6 + 0.4 * u;
  } else {
    const double u = (t - 0.5) / 0.5;
    r = 1.0 - 0.3 * u;
    g = 1.0 - 0.9 * u;
    b = 1.0 - 0.9 * u;
  }
  auto byte = [](double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255)); };
  return {byte(r), byte(g), byte(b)};
}

}  // namespace

void write_heatmap_png(const Matrix& m, const std::string& path, double lo, double hi, int scale) {
  if (m.size() == 0) throw ShapeError("write_heatmap_png: empty matrix");
  scale = std::max(1, scale);
  const int h = static_cast<int>(m.rows()) * scale, w = static_cast<int>(m.cols()) * scale;
  std::vector<std::uint8_t> rgb(static_cast<size_t>(h) * w * 3);
  const double span = hi > lo ? hi - lo : 1.0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const auto c = colormap((m(y / scale, x / scale) - lo) / span);
      std::copy(c.begin(), c.end(), rgb.begin() + (static_cast<long>(y) * w + x) * 3);
    }
  }
  io::write_png_rgb(path, h, w, rgb);
}

namespace {

int display_scale(const Matrix& m) {
  const Index big = std::max(m.rows(), m.cols());
  return big >= 256 ? 1 : static_cast<int>(256 / std::max<Index>(1, big));
}

}  // namespace

Matrix similarity_heatmap(const Matrix& features, const std::string& base) {
  Matrix s = similarity_heatmap(features);
  write_csv(s, base + ".csv");
  write_heatmap_png(s, base + ".png", -1.0, 1.0, display_scale(s));
  return s;
}

Matrix gram_export(const Matrix& m, const std::string& base) {
  Matrix g = gram_matrix(m);
  write_csv(g, base + ".csv");
  const double bound = std::max(1e-12, g.cwiseAbs().maxCoeff());
  write_heatmap_png(g, base + ".png", -bound, bound, display_scale(g));
  return g;
}

// ---- attention heatmaps -------------------------------------------------------

Matrix attention_grid(std::span<const double> row, const ImageLayout& layout) {
  if (layout.downsample <= 0 || layout.height % layout.downsample != 0 || layout.width % layout.downsample != 0) {
    throw ShapeError("attention_grid: image size not divisible by the downsampling factor");
  }
  if (static_cast<int>(row.size()) != layout.tokens()) {
    throw ShapeError("attention_grid: row length does not match the token layout");
  }
  const int gh = layout.grid_h(), gw = layout.grid_w();
  Matrix g(static_cast<Index>(layout.views) * gh, gw);
  for (int i = 0; i < layout.tokens(); ++i) g(i / gw, i % gw) = row[static_cast<size_t>(i)];
  return g;
}

Matrix upsample_grid(const Matrix& grid, int downsample) {
  Matrix out(grid.rows() * downsample, grid.cols() * downsample);
  for (Index y = 0; y < out.rows(); ++y) {
    for (Index x = 0; x < out.cols(); ++x) out(y, x) = grid(y / downsample, x / downsample);
  }
  return out;
}

double attention_mass(std::span<const double> row, std::span<const int> tokens) {
  double m = 0.0;
  for (int t : tokens) {
    if (t < 0 || static_cast<size_t>(t) >= row.size()) throw IndexError("attention_mass: token index");
    m += row[static_cast<size_t>(t)];
  }
  return m;
}

AttentionExport attention_heatmap_export(const tir::DecoderOutput& out, std::span<const int> words,
                                         std::span<const std::string> labels, const ImageTensor& background,
                                         const ImageLayout& layout, const std::string& dir,
                                         const std::string& prefix) {
  if (out.cross_weights.empty()) throw ShapeError("attention_heatmap_export: no cross-attention weights stored");
  const Matrix& w = out.cross_weights.back();
  if (!labels.empty() && labels.size() != words.size()) {
    throw ShapeError("attention_heatmap_export: one label per word required");
  }
  for (int t : words) {
    if (t < 0 || t >= w.rows()) {
      throw IndexError("attention_heatmap_export: word index " + std::to_string(t) + " outside [0, " +
                       std::to_string(w.rows()) + ")");
    }
  }
  for (Index t = 0; t < w.rows(); ++t) {
    if (std::abs(w.row(t).sum() - 1.0) > 1e-6) throw ShapeError("attention_heatmap_export: row mass is not 1");
  }
  const int img_h = layout.views * layout.height, img_w = layout.width;
  const bool has_bg = background.height == img_h && background.width == img_w;
  std::filesystem::create_directories(dir);

  AttentionExport ex;
  json side;
  side["grid"] = {layout.views * layout.grid_h(), layout.grid_w()};
  side["views"] = layout.views;
  side["downsample"] = layout.downsample;
  json rows = json::array();
  for (Index t = 0; t < w.rows(); ++t) rows.push_back(std::vector<double>(w.row(t).data(), w.row(t).data() + w.cols()));
  side["weights"] = std::move(rows);
  json words_json = json::array();

  for (size_t k = 0; k < words.size(); ++k) {
    const int t = words[k];
    const std::span<const double> row(w.data() + static_cast<Index>(t) * w.cols(), static_cast<size_t>(w.cols()));
    Matrix grid = attention_grid(row, layout);
    const Matrix up = upsample_grid(grid, layout.downsample);
    const double peak = grid.maxCoeff();
    std::vector<std::uint8_t> rgb(static_cast<size_t>(img_h) * img_w * 3);
    for (int y = 0; y < img_h; ++y) {
      for (int x = 0; x < img_w; ++x) {
        const double g = has_bg ? background.at(y, x) : 0.5;
        const auto c = colormap(0.5 + 0.5 * (peak > 0 ? up(y, x) / peak : 0.0));
        for (int ch = 0; ch < 3; ++ch) {
          rgb[(static_cast<size_t>(y) * img_w + x) * 3 + ch] =
              static_cast<std::uint8_t>(std::lround(0.5 * g * 255.0 + 0.5 * c[static_cast<size_t>(ch)]));
        }
      }
    }
    const std::string label = labels.empty() ? std::to_string(t) : labels[k];
    const std::string file = (std::filesystem::path(dir) / (prefix + "_w" + std::to_string(t) + ".png")).string();
    io::write_png_rgb(file, img_h, img_w, rgb);
    ex.files.push_back(file);
    ex.grids.push_back(std::move(grid));
    words_json.push_back({{"index", t}, {"label", label}, {"file", file}});
  }
  side["words"] = std::move(words_json);
  const std::string sidecar = (std::filesystem::path(dir) / (prefix + ".json")).string();
  std::ofstream f(sidecar);
  if (!f) throw ConfigError("cannot write " + sidecar);
  f << side.dump() << "\n";
  ex.files.push_back(sidecar);
  return ex;
}

}  // namespace uar::eval
