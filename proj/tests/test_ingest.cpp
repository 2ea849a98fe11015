#include <gtest/gtest.h>

#include <filesystem>
#include <set>
#include <sstream>

#include "iclmix/experiments.hpp"
#include "iclmix/ingest.hpp"

using namespace iclmix;

namespace {

std::size_t parse_error_line(const std::string& text) {
  std::istringstream in(text);
  try {
    read_csv(in);
  } catch (const ParseError& e) {
    return e.line();
  }
  return 0;
}

RawDataset synthetic(const std::vector<std::pair<std::string, int>>& counts, int e, std::uint64_t seed) {
  RawDataset ds;
  std::size_t total = 0;
  for (const auto& [_, c] : counts) total += static_cast<std::size_t>(c);
  ds.embeddings.resize(static_cast<Eigen::Index>(total), e);
  Rng rng(SeedPath{seed, {}});
  Eigen::Index r = 0;
  for (const auto& [label, c] : counts) {
    for (int i = 0; i < c; ++i, ++r) {
      ds.sources.push_back(label);
      ds.ratings.push_back(1.0 + static_cast<double>(rng.below(5)));
      for (int j = 0; j < e; ++j) ds.embeddings(r, j) = rng.normal() * (1.0 + j);
    }
  }
  return ds;
}

ProcessedRows processed(int rows, int d, int sources) {
  ProcessedRows p;
  p.inputs.resize(rows, d);
  for (int i = 0; i < rows; ++i) {
    p.source_ids.push_back(i % sources);
    p.labels.push_back(static_cast<double>(i));
    p.inputs.row(i).setConstant(static_cast<double>(i));
  }
  return p;
}

}  // namespace

TEST(ReadCsv, WellFormed) {
  std::istringstream in("source,rating,e1,e2\nen,3,0.5,1\n\"de,at\",5,-1,2e-3\nen,1, 7 ,8\n");
  const RawDataset ds = read_csv(in);
  ASSERT_EQ(ds.size(), 3u);
  EXPECT_EQ(ds.dim(), 2);
  EXPECT_EQ(ds.sources[1], "de,at");
  EXPECT_EQ(ds.ratings[1], 5.0);
  EXPECT_EQ(ds.embeddings(1, 1), 2e-3);
  EXPECT_EQ(ds.embeddings(2, 0), 7.0);
}

TEST(ReadCsv, ErrorsCarryLineNumbers) {
  EXPECT_EQ(parse_error_line("source,rating,e1,e2\nen,3,1,2\nen,4,1\n"), 3u);
  EXPECT_EQ(parse_error_line("source,rating,e1\nen,3,1\n\nen,x,2\n"), 4u);
  EXPECT_EQ(parse_error_line("source,stars,e1\nen,3,1\n"), 1u);
  EXPECT_EQ(parse_error_line("source,rating,e1\n,3,1\n"), 2u);
  EXPECT_EQ(parse_error_line("source,rating,e1\nen,3,nan\n"), 2u);
  std::istringstream empty("");
  EXPECT_THROW(read_csv(empty), ParseError);
  std::istringstream header_only("source,rating,e1\n");
  try {
    read_csv(header_only);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("no data rows"), std::string::npos);
  }
  EXPECT_THROW(load_csv("/nonexistent/file.csv"), ArgumentError);
}

TEST(RescaleLabels, StarScale) {
  std::vector<std::string> warnings;
  const auto y = rescale_labels({3, 5, 2, 1, 7}, 1, 5, &warnings);
  EXPECT_EQ(y[0], 0.0);
  EXPECT_EQ(y[1], 1.0);
  EXPECT_EQ(y[2], -0.5);
  EXPECT_EQ(y[3], -1.0);
  EXPECT_EQ(y[4], 1.0);
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_THROW(rescale_labels({1}, 5, 5), ArgumentError);
}

TEST(Pca, OrthonormalComponentsAndNorm) {
  const RawDataset ds = synthetic({{"a", 300}}, 10, 1);
  const PcaTransform t = fit_pca(ds, 4);
  EXPECT_LT((t.components.transpose() * t.components - Matrix::Identity(4, 4)).norm(), 1e-8);
  for (Eigen::Index j = 1; j < 4; ++j) EXPECT_GE(t.variances(j - 1), t.variances(j));
  for (int r = 0; r < 20; ++r) EXPECT_NEAR(apply_pca(t, ds.embeddings.row(r).transpose()).norm(), 2.0, 1e-10);
  // Column j has standard deviation 1 + j, so the leading component is the last axis.
  EXPECT_GT(std::abs(t.components(9, 0)), 0.95);
  EXPECT_THROW(fit_pca(ds, 11), ArgumentError);
  EXPECT_THROW(apply_pca(t, Vector::Zero(9)), ArgumentError);
}

TEST(Pca, RankOneDataCaptured) {
  Rng rng(SeedPath{2, {}});
  const Vector u = rng.unit_vector(8);
  Matrix x(200, 8);
  for (int r = 0; r < 200; ++r) x.row(r) = (rng.normal() * u + 1e-3 * rng.normal_vector(8)).transpose();
  const PcaTransform t = fit_pca(x, 1);
  EXPECT_GE(t.explained_ratio(), 0.999);
  EXPECT_GT(std::abs(t.components.col(0).dot(u)), 0.9999);
}

TEST(Pca, FullRankWhiteDataReconstructs) {
  Rng rng(SeedPath{3, {}});
  Matrix x(500, 5);
  for (int r = 0; r < 500; ++r) x.row(r) = rng.normal_vector(5).transpose();
  const PcaTransform t = fit_pca(x, 5);
  for (int r = 0; r < 10; ++r) {
    const Vector centered = x.row(r).transpose() - t.mean;
    const Vector back = t.components * (t.components.transpose() * centered);
    EXPECT_LT((back - centered).norm(), 1e-10 * centered.norm());
  }
  EXPECT_NEAR(t.explained_ratio(), 1.0, 1e-12);
}

TEST(Pca, StandardizeGivesUnitVariance) {
  const RawDataset ds = synthetic({{"a", 2000}}, 6, 4);
  const PcaTransform t = fit_pca(ds, 3, true);
  Vector sum = Vector::Zero(3), sum2 = Vector::Zero(3);
  for (Eigen::Index r = 0; r < ds.embeddings.rows(); ++r) {
    const Vector z = apply_pca(t, ds.embeddings.row(r).transpose());
    sum += z;
    sum2 += z.cwiseProduct(z);
  }
  const double n = static_cast<double>(ds.embeddings.rows());
  for (int j = 0; j < 3; ++j) EXPECT_NEAR(sum2(j) / n - std::pow(sum(j) / n, 2), 1.0 * (n - 1) / n, 1e-9);
}

TEST(GroupContexts, CountsAndLeftover) {
  GroupingReport rep;
  const auto ctxs = group_contexts(processed(130, 3, 1), 1, 64, SeedPath{5, {}}, &rep);
  EXPECT_EQ(ctxs.size(), 2u);
  EXPECT_EQ(rep.contexts[0], 2);
  EXPECT_EQ(rep.leftover[0], 0);
  EXPECT_TRUE(rep.warnings.empty());
  EXPECT_FALSE(ctxs[0].task.has_value());

  GroupingReport small;
  EXPECT_TRUE(group_contexts(processed(40, 3, 1), 1, 64, SeedPath{}, &small).empty());
  EXPECT_EQ(small.warnings.size(), 1u);
}

TEST(GroupContexts, DisjointDeterministicSameSource) {
  const ProcessedRows p = processed(200, 2, 3);
  GroupingReport rep;
  const auto a = group_contexts(p, 3, 9, SeedPath{6, {}}, &rep);
  const auto b = group_contexts(p, 3, 9, SeedPath{6, {}});
  ASSERT_EQ(a.size(), b.size());
  std::set<double> used;
  for (std::size_t c = 0; c < a.size(); ++c) {
    EXPECT_EQ(a[c].labels, b[c].labels);
    for (int i = 0; i <= 9; ++i) {
      const double row = a[c].labels(i);
      EXPECT_TRUE(used.insert(row).second);
      EXPECT_EQ(static_cast<int>(row) % 3, a[c].source_id);
      EXPECT_EQ(a[c].inputs(0, i), row);
    }
  }
  for (int s = 0; s < 3; ++s) EXPECT_EQ(rep.contexts[s] * 10 + rep.leftover[s], s < 2 ? 67 : 66);
  const auto other = group_contexts(p, 3, 9, SeedPath{7, {}});
  EXPECT_NE(a[0].labels, other[0].labels);
}

TEST(IngestDataset, SplitsWithoutLeakage) {
  const RawDataset raw = synthetic({{"en", 400}, {"de", 260}}, 12, 8);
  IngestOptions opt;
  opt.dim = 6;
  opt.ell = 9;
  opt.split = 0.75;
  opt.seed = 11;
  IngestSummary sum;
  const ContextStore store = ingest_dataset(raw, opt, &sum);
  EXPECT_EQ(store.source_labels, (std::vector<std::string>{"de", "en"}));
  EXPECT_EQ(sum.rows, (std::vector<int>{260, 400}));
  EXPECT_EQ(sum.train_contexts, (std::vector<int>{19, 30}));
  EXPECT_EQ(sum.test_contexts, (std::vector<int>{6, 10}));
  EXPECT_EQ(sum.train_leftover[0], 5);
  EXPECT_GT(sum.explained_variance, 0.0);
  EXPECT_LT(sum.explained_variance, 1.0);
  for (const auto& c : store.train) {
    EXPECT_EQ(c.d, 6);
    for (int p = 0; p <= c.ell; ++p) {
      EXPECT_NEAR(c.inputs.col(p).norm(), std::sqrt(6.0), 1e-10);
      EXPECT_LE(std::abs(c.labels(p)), 1.0);
    }
  }

  // PCA sees only the training rows: corrupting test rows leaves training contexts unchanged.
  RawDataset corrupted = raw;
  const ContextStore again = ingest_dataset(raw, opt);
  for (std::size_t i = 0; i < store.train.size(); ++i) EXPECT_EQ(store.train[i].inputs, again.train[i].inputs);
  const auto emb = store.train[0].inputs;
  std::vector<Eigen::Index> test_rows;
  {
    // Recover the test rows by the same per-source shuffle the ingest uses.
    std::map<std::string, std::vector<Eigen::Index>> rows;
    for (std::size_t i = 0; i < raw.size(); ++i) rows[raw.sources[i]].push_back(static_cast<Eigen::Index>(i));
    int s = 0;
    for (auto& [_, idx] : rows) {
      Rng shuffle(SeedPath{11, {}}.child(0).child(static_cast<std::uint64_t>(s++)));
      for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[shuffle.below(i)]);
      const auto cut = static_cast<std::size_t>(std::floor(0.75 * static_cast<double>(idx.size())));
      test_rows.insert(test_rows.end(), idx.begin() + static_cast<std::ptrdiff_t>(cut), idx.end());
    }
  }
  for (Eigen::Index r : test_rows) corrupted.embeddings.row(r) *= 1000.0;
  const ContextStore leaked = ingest_dataset(corrupted, opt);
  EXPECT_LT((leaked.train[0].inputs - emb).norm(), 1e-9);

  opt.dim = 13;
  EXPECT_THROW(ingest_dataset(raw, opt), ArgumentError);
}

TEST(ContextStore, RoundTripsThroughDisk) {
  const RawDataset raw = synthetic({{"x", 120}, {"y,z", 90}}, 8, 13);
  IngestOptions opt;
  opt.dim = 4;
  opt.ell = 5;
  IngestSummary sum;
  const ContextStore store = ingest_dataset(raw, opt, &sum);
  const auto dir = std::filesystem::temp_directory_path() / "iclmix_test_store";
  std::filesystem::remove_all(dir);
  save_store(store, sum, opt, dir);
  const ContextStore back = load_store(dir);
  EXPECT_EQ(back.source_labels, store.source_labels);
  ASSERT_EQ(back.train.size(), store.train.size());
  ASSERT_EQ(back.test.size(), store.test.size());
  for (std::size_t i = 0; i < store.train.size(); ++i) {
    EXPECT_EQ(back.train[i].inputs, store.train[i].inputs);
    EXPECT_EQ(back.train[i].labels, store.train[i].labels);
    EXPECT_EQ(back.train[i].source_id, store.train[i].source_id);
  }
  EXPECT_EQ(store_csv(back), store_csv(store));
  std::filesystem::remove_all(dir);
  EXPECT_THROW(load_store(dir), ArgumentError);
}

TEST(ContextStore, DrivesExperimentsPerSource) {
  const RawDataset raw = synthetic({{"a", 2000}, {"b", 2000}}, 10, 14);
  IngestOptions opt;
  opt.dim = 4;
  opt.ell = 4;
  const ContextStore store = ingest_dataset(raw, opt);
  ExperimentConfig c = parse_config(R"({"sweep": {"variable": "n", "values": [100, 200]}, "k": 40,
                                         "mc_runs": 2, "m_calib": 32, "data_store": "unused"})");
  RunOptions ro;
  ro.store = &store;
  const ExperimentOutput out = run_experiment(c, ro);
  EXPECT_EQ(out.result.rows.size(), 2u * 3u * 3u);
  std::set<std::string> sources;
  for (const auto& r : out.result.rows) sources.insert(r.source);
  EXPECT_EQ(sources, (std::set<std::string>{"0", "1", "overall"}));
  EXPECT_EQ(out.metadata["sources"].dump(), R"(["a","b"])");
  EXPECT_EQ(out.result.to_csv(), run_experiment(c, ro).result.to_csv());

  c.sweep.variable = "theta_x";
  EXPECT_THROW(run_experiment(c, ro), ArgumentError);
  c.sweep.variable = "n";
  c.sweep.values = {100000};
  EXPECT_THROW(run_experiment(c, ro), ArgumentError);
}
