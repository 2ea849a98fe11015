#pragma once

// Real-data ingestion: CSV of (source, rating, embedding) rows -> rescaled
// labels, PCA-reduced and normalized inputs, same-source contexts.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "iclmix/datagen.hpp"
#include "iclmix/errors.hpp"
#include "iclmix/io.hpp"
#include "iclmix/numerics.hpp"

namespace iclmix {

struct RawDataset {
  std::vector<std::string> sources;  // per row
  std::vector<double> ratings;       // per row
  Matrix embeddings;                 // rows x E

  std::size_t size() const noexcept { return ratings.size(); }
  Eigen::Index dim() const noexcept { return embeddings.cols(); }
};

namespace detail {

/// Splits one CSV record. Double-quoted fields may contain commas and "".
inline std::vector<std::string> split_csv_line(std::string_view line, std::size_t line_no) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"' && cur.empty()) {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (quoted) throw ParseError("unterminated quoted field", line_no);
  out.push_back(std::move(cur));
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline double parse_double(std::string_view field, std::size_t line_no, std::string_view column) {
  field = trim(field);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
  if (ec != std::errc() || ptr != field.data() + field.size() || field.empty() || !std::isfinite(v))
    throw ParseError("column '" + std::string(column) + "': '" + std::string(field) + "' is not a finite number",
                     line_no);
  return v;
}

}  // namespace detail

/// Header: source,rating,e1,...,eE.
inline RawDataset read_csv(std::istream& in) {
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++line_no;
    if (!detail::trim(line).empty()) {
      header = detail::split_csv_line(line, line_no);
      break;
    }
  }
  if (header.empty()) throw ParseError("no data rows", line_no);
  for (auto& h : header) h = std::string(detail::trim(h));
  if (!header.empty() && header[0].rfind("\xEF\xBB\xBF", 0) == 0) header[0].erase(0, 3);
  if (header.size() < 3 || header[0] != "source" || header[1] != "rating")
    throw ParseError("header must be source,rating,e1,...,eE", line_no);
  const std::size_t e = header.size() - 2;

  RawDataset ds;
  std::vector<double> flat;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto fields = detail::split_csv_line(line, line_no);
    if (fields.size() != header.size())
      throw ParseError("expected " + std::to_string(header.size()) + " fields, found " +
                           std::to_string(fields.size()),
                       line_no);
    const std::string_view src = detail::trim(fields[0]);
    if (src.empty()) throw ParseError("empty source label", line_no);
    ds.sources.emplace_back(src);
    ds.ratings.push_back(detail::parse_double(fields[1], line_no, "rating"));
    for (std::size_t j = 0; j < e; ++j) flat.push_back(detail::parse_double(fields[j + 2], line_no, header[j + 2]));
  }
  if (ds.ratings.empty()) throw ParseError("no data rows", line_no);
  const auto rows = static_cast<Eigen::Index>(ds.ratings.size());
  ds.embeddings = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      flat.data(), rows, static_cast<Eigen::Index>(e));
  return ds;
}

inline RawDataset load_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ArgumentError("cannot open '" + path.string() + "'");
  return read_csv(in);
}

/// Maps [lo, hi] onto [-1, 1]; out-of-range ratings are clamped and counted.
inline std::vector<double> rescale_labels(const std::vector<double>& ratings, double lo, double hi,
                                          std::vector<std::string>* warnings = nullptr) {
  if (!(lo < hi)) throw ArgumentError("rescale_labels: need lo < hi");
  const double mid = 0.5 * (lo + hi), half = 0.5 * (hi - lo);
  std::vector<double> out;
  out.reserve(ratings.size());
  std::size_t clamped = 0;
  for (double r : ratings) {
    if (r < lo || r > hi) ++clamped;
    out.push_back((std::clamp(r, lo, hi) - mid) / half);
  }
  if (clamped > 0 && warnings)
    warnings->push_back(std::to_string(clamped) + " rating(s) outside [" + std::to_string(lo) + ", " +
                        std::to_string(hi) + "] clamped");
  return out;
}

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

struct PcaTransform {
  Vector mean;             // E
  Matrix components;       // E x d, orthonormal columns
  Vector variances;        // d leading eigenvalues
  double total_variance = 0.0;
  bool standardize = false;  // per-feature scaling instead of per-vector norm

  Eigen::Index target_dim() const noexcept { return components.cols(); }
  double explained_ratio() const {
    return total_variance > 0.0 ? variances.sum() / total_variance : 1.0;
  }
};

/// Fits on the rows of `x` (the training split).
inline PcaTransform fit_pca(const Matrix& x, int d, bool standardize = false) {
  if (d < 1) throw ArgumentError("fit_pca: d must be positive");
  if (d > x.cols())
    throw ArgumentError("fit_pca: target dimension " + std::to_string(d) + " exceeds embedding dimension " +
                        std::to_string(x.cols()));
  if (x.rows() < 2) throw ArgumentError("fit_pca: need at least two rows");
  PcaTransform t;
  t.standardize = standardize;
  t.mean = x.colwise().mean().transpose();
  const Matrix centered = x.rowwise() - t.mean.transpose();
  Matrix cov = Matrix::Zero(x.cols(), x.cols());
  cov.selfadjointView<Eigen::Lower>().rankUpdate(centered.transpose(), 1.0 / static_cast<double>(x.rows() - 1));
  cov.triangularView<Eigen::StrictlyUpper>() = cov.transpose();
  t.total_variance = cov.trace();
  const EigenPairs top = symmetric_eig_topk(cov, d);
  t.components = top.vectors;
  t.variances = top.values.cwiseMax(0.0);
  // Deterministic sign: largest-magnitude loading positive.
  for (Eigen::Index j = 0; j < t.components.cols(); ++j) {
    Eigen::Index arg = 0;
    t.components.col(j).cwiseAbs().maxCoeff(&arg);
    if (t.components(arg, j) < 0.0) t.components.col(j) *= -1.0;
  }
  return t;
}

inline PcaTransform fit_pca(const RawDataset& ds, int d, bool standardize = false) {
  return fit_pca(ds.embeddings, d, standardize);
}

/// components^T (x - mean), then scaled to norm sqrt(d) (or per-feature unit
/// variance when standardizing). A zero projection stays zero.
inline Vector apply_pca(const PcaTransform& t, const Eigen::Ref<const Vector>& x) {
  if (x.size() != t.mean.size())
    throw ArgumentError("apply_pca: embedding has dimension " + std::to_string(x.size()) + ", expected " +
                        std::to_string(t.mean.size()));
  Vector z = t.components.transpose() * (x - t.mean);
  if (t.standardize) {
    for (Eigen::Index j = 0; j < z.size(); ++j)
      if (t.variances(j) > 0.0) z(j) /= std::sqrt(t.variances(j));
    return z;
  }
  const double nrm = z.norm();
  if (nrm > 0.0) z *= std::sqrt(static_cast<double>(z.size())) / nrm;
  return z;
}

// ---------------------------------------------------------------------------
// Contexts
// ---------------------------------------------------------------------------

/// Preprocessed rows: `inputs` is rows x d.
struct ProcessedRows {
  std::vector<int> source_ids;
  std::vector<double> labels;
  Matrix inputs;
};

struct GroupingReport {
  std::vector<int> contexts;  // per source id
  std::vector<int> leftover;  // per source id
  std::vector<std::string> warnings;
};

/// Rows of each source are shuffled with seed.child(source_id) and cut into
/// disjoint groups of ell + 1; the last row of a group is the query.
inline std::vector<Context> group_contexts(const ProcessedRows& rows, int num_sources, int ell,
                                           const SeedPath& seed, GroupingReport* report = nullptr) {
  if (ell < 1) throw ArgumentError("group_contexts: ell must be positive");
  if (rows.source_ids.size() != rows.labels.size() ||
      static_cast<Eigen::Index>(rows.labels.size()) != rows.inputs.rows())
    throw ArgumentError("group_contexts: row arrays have different lengths");
  std::vector<std::vector<Eigen::Index>> by_source(static_cast<std::size_t>(num_sources));
  for (std::size_t i = 0; i < rows.source_ids.size(); ++i) {
    const int s = rows.source_ids[i];
    if (s < 0 || s >= num_sources) throw ArgumentError("group_contexts: source id out of range");
    by_source[s].push_back(static_cast<Eigen::Index>(i));
  }
  GroupingReport local;
  GroupingReport& rep = report ? *report : local;
  rep.contexts.assign(num_sources, 0);
  rep.leftover.assign(num_sources, 0);
  const int d = static_cast<int>(rows.inputs.cols());
  const auto group = static_cast<std::size_t>(ell) + 1;
  std::vector<Context> out;
  for (int s = 0; s < num_sources; ++s) {
    auto& idx = by_source[s];
    Rng rng(seed.child(static_cast<std::uint64_t>(s)));
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
    const std::size_t count = idx.size() / group;
    rep.contexts[s] = static_cast<int>(count);
    rep.leftover[s] = static_cast<int>(idx.size() - count * group);
    if (count == 0 && !idx.empty())
      rep.warnings.push_back("source " + std::to_string(s) + " has " + std::to_string(idx.size()) +
                             " rows, fewer than ell + 1 = " + std::to_string(group) + "; skipped");
    for (std::size_t c = 0; c < count; ++c) {
      Context ctx;
      ctx.d = d;
      ctx.ell = ell;
      ctx.source_id = s;
      ctx.inputs.resize(d, ell + 1);
      ctx.labels.resize(ell + 1);
      for (std::size_t p = 0; p < group; ++p) {
        const Eigen::Index r = idx[c * group + p];
        ctx.inputs.col(static_cast<Eigen::Index>(p)) = rows.inputs.row(r).transpose();
        ctx.labels(static_cast<Eigen::Index>(p)) = rows.labels[r];
      }
      out.push_back(std::move(ctx));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Context store
// ---------------------------------------------------------------------------

struct ContextStore {
  int d = 0;
  int ell = 0;
  std::vector<std::string> source_labels;  // index = source id
  std::vector<Context> train;
  std::vector<Context> test;

  std::size_t num_sources() const noexcept { return source_labels.size(); }

  std::vector<std::vector<Context>> by_source(const std::vector<Context>& ctxs) const {
    std::vector<std::vector<Context>> out(num_sources());
    for (const auto& c : ctxs) out[c.source_id].push_back(c);
    return out;
  }
};

struct IngestOptions {
  int dim = 64;
  int ell = 64;
  double scale_lo = 1.0;
  double scale_hi = 5.0;
  double split = 0.8;  // training fraction of each source's rows
  std::uint64_t seed = 0;
  bool standardize = false;
};

struct IngestSummary {
  std::vector<std::string> source_labels;
  std::vector<int> rows;
  std::vector<int> train_contexts;
  std::vector<int> test_contexts;
  std::vector<int> train_leftover;
  std::vector<int> test_leftover;
  double explained_variance = 0.0;
  int embedding_dim = 0;
  std::vector<std::string> warnings;

  nlohmann::ordered_json to_json(const IngestOptions& opt) const {
    nlohmann::ordered_json j;
    j["dim"] = opt.dim;
    j["ell"] = opt.ell;
    j["embedding_dim"] = embedding_dim;
    j["scale_lo"] = opt.scale_lo;
    j["scale_hi"] = opt.scale_hi;
    j["split"] = opt.split;
    j["seed"] = opt.seed;
    j["normalization"] = opt.standardize ? "per_feature" : "per_vector";
    j["explained_variance"] = explained_variance;
    j["sources"] = nlohmann::ordered_json::array();
    for (std::size_t s = 0; s < source_labels.size(); ++s) {
      j["sources"].push_back({{"id", s},
                              {"label", source_labels[s]},
                              {"rows", rows[s]},
                              {"train_contexts", train_contexts[s]},
                              {"test_contexts", test_contexts[s]},
                              {"train_leftover", train_leftover[s]},
                              {"test_leftover", test_leftover[s]}});
    }
    j["warnings"] = warnings;
    return j;
  }
};

/// Per source: shuffle rows (seed.child(0)), the first floor(split * rows)
/// rows train, the rest test. PCA is fit on the training rows only.
inline ContextStore ingest_dataset(const RawDataset& raw, const IngestOptions& opt,
                                   IngestSummary* summary = nullptr) {
  if (opt.ell < 1) throw ArgumentError("ingest: ell must be positive");
  if (!(opt.split > 0.0 && opt.split < 1.0)) throw ArgumentError("ingest: split must lie in (0, 1)");
  if (opt.dim > raw.dim())
    throw ArgumentError("ingest: --dim " + std::to_string(opt.dim) + " exceeds embedding dimension " +
                        std::to_string(raw.dim()));
  IngestSummary local;
  IngestSummary& sum = summary ? *summary : local;
  sum.embedding_dim = static_cast<int>(raw.dim());

  std::map<std::string, int> ids;
  for (const auto& s : raw.sources) ids.emplace(s, 0);
  ContextStore store;
  store.d = opt.dim;
  store.ell = opt.ell;
  for (auto& [label, id] : ids) {
    id = static_cast<int>(store.source_labels.size());
    store.source_labels.push_back(label);
  }
  const int num_sources = static_cast<int>(store.source_labels.size());
  sum.source_labels = store.source_labels;

  const auto labels = rescale_labels(raw.ratings, opt.scale_lo, opt.scale_hi, &sum.warnings);
  const SeedPath root{opt.seed, {}};
  std::vector<std::vector<Eigen::Index>> rows_of(num_sources);
  for (std::size_t i = 0; i < raw.size(); ++i) rows_of[ids.at(raw.sources[i])].push_back(static_cast<Eigen::Index>(i));
  sum.rows.clear();
  std::vector<Eigen::Index> train_rows, test_rows;
  for (int s = 0; s < num_sources; ++s) {
    auto& idx = rows_of[s];
    sum.rows.push_back(static_cast<int>(idx.size()));
    Rng rng(root.child(0).child(static_cast<std::uint64_t>(s)));
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
    const auto cut = static_cast<std::size_t>(std::floor(opt.split * static_cast<double>(idx.size())));
    train_rows.insert(train_rows.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(cut));
    test_rows.insert(test_rows.end(), idx.begin() + static_cast<std::ptrdiff_t>(cut), idx.end());
  }
  if (train_rows.size() < 2) throw ArgumentError("ingest: training split has fewer than two rows");

  Matrix train_emb(static_cast<Eigen::Index>(train_rows.size()), raw.dim());
  for (std::size_t i = 0; i < train_rows.size(); ++i) train_emb.row(i) = raw.embeddings.row(train_rows[i]);
  const PcaTransform pca = fit_pca(train_emb, opt.dim, opt.standardize);
  sum.explained_variance = pca.explained_ratio();

  auto process = [&](const std::vector<Eigen::Index>& which) {
    ProcessedRows pr;
    pr.inputs.resize(static_cast<Eigen::Index>(which.size()), opt.dim);
    for (std::size_t i = 0; i < which.size(); ++i) {
      pr.source_ids.push_back(ids.at(raw.sources[which[i]]));
      pr.labels.push_back(labels[which[i]]);
      pr.inputs.row(i) = apply_pca(pca, raw.embeddings.row(which[i]).transpose()).transpose();
    }
    return pr;
  };
  GroupingReport tr, te;
  store.train = group_contexts(process(train_rows), num_sources, opt.ell, root.child(1), &tr);
  store.test = group_contexts(process(test_rows), num_sources, opt.ell, root.child(2), &te);
  sum.train_contexts = tr.contexts;
  sum.test_contexts = te.contexts;
  sum.train_leftover = tr.leftover;
  sum.test_leftover = te.leftover;
  for (auto& w : tr.warnings) sum.warnings.push_back("train: " + w);
  for (auto& w : te.warnings) sum.warnings.push_back("test: " + w);
  return store;
}

/// contexts.csv header: split,source,source_id,context,position,label,x1..xd.
inline std::string store_csv(const ContextStore& store) {
  std::string out = "split,source,source_id,context,position,label";
  for (int i = 1; i <= store.d; ++i) out += ",x" + std::to_string(i);
  out += '\n';
  auto emit = [&](const char* split, const std::vector<Context>& ctxs) {
    for (std::size_t c = 0; c < ctxs.size(); ++c) {
      const Context& ctx = ctxs[c];
      for (int p = 0; p <= ctx.ell; ++p) {
        out += split;
        out += ',' + csv_field(store.source_labels[ctx.source_id]) + ',' + std::to_string(ctx.source_id) + ',' +
               std::to_string(c) + ',' + std::to_string(p) + ',' + format_double(ctx.labels(p));
        for (int i = 0; i < ctx.d; ++i) out += ',' + format_double(ctx.inputs(i, p));
        out += '\n';
      }
    }
  };
  emit("train", store.train);
  emit("test", store.test);
  return out;
}

inline void save_store(const ContextStore& store, const IngestSummary& summary, const IngestOptions& opt,
                       const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_file_atomic(dir / "contexts.csv", store_csv(store));
  write_file_atomic(dir / "summary.json", summary.to_json(opt).dump(2) + "\n");
}

inline ContextStore load_store(const std::filesystem::path& dir) {
  std::ifstream meta(dir / "summary.json");
  if (!meta) throw ArgumentError("context store: cannot open '" + (dir / "summary.json").string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::exception& e) {
    throw ArgumentError(std::string("context store: bad summary.json: ") + e.what());
  }
  ContextStore store;
  store.d = j.at("dim").get<int>();
  store.ell = j.at("ell").get<int>();
  for (const auto& s : j.at("sources")) store.source_labels.push_back(s.at("label").get<std::string>());

  std::ifstream in(dir / "contexts.csv");
  if (!in) throw ArgumentError("context store: cannot open '" + (dir / "contexts.csv").string() + "'");
  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(in, line)) throw ParseError("context store: empty contexts.csv", line_no);
  const std::size_t expected = 6 + static_cast<std::size_t>(store.d);
  Context* cur = nullptr;
  std::string cur_key;
  int next_pos = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto f = detail::split_csv_line(line, line_no);
    if (f.size() != expected) throw ParseError("context store: ragged row", line_no);
    const bool train = f[0] == "train";
    if (!train && f[0] != "test") throw ParseError("context store: split must be train or test", line_no);
    const int sid = static_cast<int>(detail::parse_double(f[2], line_no, "source_id"));
    const int pos = static_cast<int>(detail::parse_double(f[4], line_no, "position"));
    if (sid < 0 || static_cast<std::size_t>(sid) >= store.num_sources())
      throw ParseError("context store: source_id out of range", line_no);
    const std::string key = f[0] + '/' + f[2] + '/' + f[3];
    if (pos == 0) {
      if (cur && next_pos != store.ell + 1) throw ParseError("context store: incomplete context", line_no);
      auto& vec = train ? store.train : store.test;
      vec.emplace_back();
      cur = &vec.back();
      cur_key = key;
      cur->d = store.d;
      cur->ell = store.ell;
      cur->source_id = sid;
      cur->inputs.resize(store.d, store.ell + 1);
      cur->labels.resize(store.ell + 1);
    } else if (!cur || key != cur_key || pos != next_pos) {
      throw ParseError("context store: rows of a context must be contiguous and ordered", line_no);
    }
    if (pos < 0 || pos > store.ell) throw ParseError("context store: position out of range", line_no);
    next_pos = pos + 1;
    cur->labels(pos) = detail::parse_double(f[5], line_no, "label");
    for (int i = 0; i < store.d; ++i) cur->inputs(i, pos) = detail::parse_double(f[6 + i], line_no, "x");
  }
  if (cur && next_pos != store.ell + 1) throw ParseError("context store: incomplete context", line_no);
  return store;
}

}  // namespace iclmix
