#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "revlm/common.hpp"
#include "revlm/eval.hpp"

namespace revlm {

// ---------------------------------------------------------------------------
// Special functions. The regularized incomplete beta function drives both
// Student-t and F tail probabilities; continued-fraction evaluation
// (modified Lentz) is accurate to ~1e-12 over the ranges used here.
// ---------------------------------------------------------------------------

namespace stats_detail {

inline double betacf(double a, double b, double x) {
  constexpr int kMaxIter = 300;
  constexpr double kEps = 3e-14;
  constexpr double kFpMin = 1e-300;

  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kFpMin) d = kFpMin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::abs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::abs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) return h;
  }
  throw std::runtime_error("incomplete beta continued fraction failed to converge");
}

}  // namespace stats_detail

/// Regularized incomplete beta I_x(a, b).
inline double ibeta(double a, double b, double x) {
  if (!(a > 0) || !(b > 0)) throw ValidationError("ibeta: a and b must be positive");
  if (x < 0.0 || x > 1.0) throw ValidationError("ibeta: x must be in [0,1]");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                          a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(ln_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * stats_detail::betacf(a, b, x) / a;
  return 1.0 - front * stats_detail::betacf(b, a, 1.0 - x) / b;
}

/// Two-sided p-value for a Student-t statistic with df degrees of freedom.
inline double t_two_sided_p(double t, double df) {
  if (!(df > 0)) throw ValidationError("t_two_sided_p: df must be positive");
  if (!std::isfinite(t)) return 0.0;
  return ibeta(df / 2.0, 0.5, df / (df + t * t));
}

/// Upper-tail probability P(F(d1, d2) > f).
inline double f_upper_p(double f, double d1, double d2) {
  if (!(d1 > 0) || !(d2 > 0)) throw ValidationError("f_upper_p: df must be positive");
  if (f <= 0.0) return 1.0;
  if (!std::isfinite(f)) return 0.0;
  return ibeta(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f));
}

// ---------------------------------------------------------------------------
// Difficulty vectors and correlations.
// ---------------------------------------------------------------------------

/// Per-item difficulty for one source, aligned to an explicit item-id
/// order. For a model: the signed PPL difference (altered - original),
/// larger meaning easier. For humans: mean per-item accuracy.
struct DifficultyVector {
  std::string source;
  std::optional<Orientation> direction;  // set for model sources
  std::vector<std::string> item_ids;
  std::vector<double> values;
};

inline DifficultyVector model_difficulty(const BenchmarkResult& result, std::string source,
                                         std::optional<Orientation> direction = {}) {
  if (result.scores.empty()) throw ValidationError("model_difficulty: empty result");
  DifficultyVector v;
  v.source = std::move(source);
  v.direction = direction;
  v.item_ids.reserve(result.scores.size());
  v.values.reserve(result.scores.size());
  for (const auto& s : result.scores) {
    v.item_ids.push_back(s.item_id);
    v.values.push_back(s.ppl_altered - s.ppl_original);
  }
  return v;
}

struct HumanResponse {
  std::string participant_id;
  std::string item_id;
  int correct = 0;                       // 0/1
  std::optional<double> confidence;      // ordinal, optional
  std::optional<double> expertise;       // ordinal, optional
};

/// Reads the human-response CSV (header participant_id,item_id,correct,
/// confidence,expertise; the last two may be empty). Each (participant,
/// item) pair may appear at most once.
inline std::vector<HumanResponse> load_human_responses(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open human responses file: " + path.string());

  std::string line;
  if (!std::getline(in, line))
    throw ValidationError(path.string() + ": empty human responses file");
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::string field;
    std::stringstream ss(s);
    while (std::getline(ss, field, ',')) out.push_back(field);
    if (!s.empty() && s.back() == ',') out.push_back("");
    return out;
  };
  while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
  const auto header = split(line);
  if (header.size() < 3 || header[0] != "participant_id" || header[1] != "item_id" ||
      header[2] != "correct")
    throw ValidationError(path.string() +
                          ": expected header participant_id,item_id,correct[,confidence,expertise]");

  std::vector<HumanResponse> responses;
  std::unordered_set<std::string> seen;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
    if (line.empty()) continue;
    const auto fields = split(line);
    if (fields.size() < 3)
      throw ValidationError(path.string() + ": line " + std::to_string(line_no) +
                            ": expected at least 3 fields");
    HumanResponse r;
    r.participant_id = fields[0];
    r.item_id = fields[1];
    try {
      r.correct = std::stoi(fields[2]);
    } catch (const std::exception&) {
      throw ValidationError(path.string() + ": line " + std::to_string(line_no) +
                            ": non-numeric correctness flag");
    }
    if (r.correct != 0 && r.correct != 1)
      throw ValidationError(path.string() + ": line " + std::to_string(line_no) +
                            ": correctness must be 0 or 1");
    if (fields.size() > 3 && !fields[3].empty()) r.confidence = std::stod(fields[3]);
    if (fields.size() > 4 && !fields[4].empty()) r.expertise = std::stod(fields[4]);
    if (!seen.insert(r.participant_id + "\x1f" + r.item_id).second)
      throw ValidationError(path.string() + ": line " + std::to_string(line_no) +
                            ": duplicate (participant, item) pair");
    responses.push_back(std::move(r));
  }
  if (responses.empty()) throw ValidationError(path.string() + ": no responses");
  return responses;
}

struct HumanDifficulty {
  DifficultyVector vector;               // items with >= 1 response
  std::vector<std::string> excluded;     // items with zero responses
};

/// Mean per-item accuracy over the given item order. Responses naming
/// unknown items are a validation error; items with no responses are
/// excluded and reported.
inline HumanDifficulty human_difficulty(const std::vector<HumanResponse>& responses,
                                        const std::vector<std::string>& item_ids) {
  std::unordered_map<std::string, std::pair<std::int64_t, std::int64_t>> tally;  // correct, total
  std::unordered_set<std::string> known(item_ids.begin(), item_ids.end());
  for (const auto& r : responses) {
    if (!known.contains(r.item_id))
      throw ValidationError("human_difficulty: response references unknown item id '" +
                            r.item_id + "'");
    auto& t = tally[r.item_id];
    t.first += r.correct;
    t.second += 1;
  }
  HumanDifficulty out;
  out.vector.source = "human";
  for (const auto& id : item_ids) {
    auto it = tally.find(id);
    if (it == tally.end()) {
      out.excluded.push_back(id);
      continue;
    }
    out.vector.item_ids.push_back(id);
    out.vector.values.push_back(static_cast<double>(it->second.first) /
                                static_cast<double>(it->second.second));
  }
  if (out.vector.item_ids.empty())
    throw ValidationError("human_difficulty: no item has any response");
  return out;
}

/// Restricts a difficulty vector to the given item ids, in that order.
inline DifficultyVector restrict_to(const DifficultyVector& v,
                                    const std::vector<std::string>& item_ids) {
  std::unordered_map<std::string, double> by_id;
  for (std::size_t i = 0; i < v.item_ids.size(); ++i) by_id[v.item_ids[i]] = v.values[i];
  DifficultyVector out;
  out.source = v.source;
  out.direction = v.direction;
  for (const auto& id : item_ids) {
    auto it = by_id.find(id);
    if (it == by_id.end())
      throw ValidationError("difficulty vector '" + v.source + "' is missing item '" + id + "'");
    out.item_ids.push_back(id);
    out.values.push_back(it->second);
  }
  return out;
}

/// Mid-ranks (ties get the average of the ranks they span), 1-based.
inline std::vector<double> mid_ranks(const std::vector<double>& values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(),
            [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && values[idx[j]] == values[idx[i]]) ++j;
    const double rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k) ranks[idx[k]] = rank;
    i = j;
  }
  return ranks;
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 3)
    throw ValidationError("pearson: need two aligned vectors of length >= 3");
  const auto n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  if (sxx == 0.0 || syy == 0.0)
    throw ValidationError("pearson: correlation undefined for a constant input");
  return sxy / std::sqrt(sxx * syy);
}

/// Spearman rank correlation: Pearson correlation of mid-ranks.
/// Requires id-aligned, non-constant vectors of length >= 3.
inline double spearman(const DifficultyVector& x, const DifficultyVector& y) {
  if (x.item_ids != y.item_ids)
    throw ValidationError("spearman: difficulty vectors are not aligned ('" + x.source +
                          "' vs '" + y.source + "')");
  if (x.values.size() < 3) throw ValidationError("spearman: need at least 3 items");
  return pearson(mid_ranks(x.values), mid_ranks(y.values));
}

// ---------------------------------------------------------------------------
// Paired t-test and the direction x size ANOVA.
// ---------------------------------------------------------------------------

struct TTestResult {
  double t = 0.0;
  std::size_t df = 0;
  double p = 1.0;
};

/// Paired two-sided t-test on the differences x - y.
inline TTestResult paired_t(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw ValidationError("paired_t: length mismatch");
  const std::size_t n = x.size();
  if (n < 2) throw ValidationError("paired_t: need at least 2 pairs");
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = x[i] - y[i];
  const double mean = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(n);
  double ss = 0.0;
  for (double v : d) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  if (sd == 0.0) throw ValidationError("paired_t: zero variance of differences");
  TTestResult r;
  r.t = mean / (sd / std::sqrt(static_cast<double>(n)));
  r.df = n - 1;
  r.p = t_two_sided_p(r.t, static_cast<double>(r.df));
  return r;
}

struct AnovaRun {
  std::string run_id;
  Orientation direction = Orientation::kForward;
  double size = 0.0;                 // continuous size covariate
  std::vector<int> correct;          // per-item 0/1, aligned to table item_ids
};

/// Rectangular accuracy table: every run covers the same item set.
struct AccuracyTable {
  std::vector<std::string> item_ids;
  std::vector<AnovaRun> runs;
};

struct AnovaEffect {
  double f = 0.0;
  double p = 1.0;
};

struct AnovaResult {
  AnovaEffect direction;
  AnovaEffect size;
  AnovaEffect interaction;
  std::size_t df1 = 1;
  std::size_t df2 = 0;
};

/// Direction x size analysis over per-run accuracies, realized as an
/// OLS fit of accuracy on direction (binary), size (continuous) and
/// their product; each term is tested against the residual with
/// df = runs - 4 (six runs give the df (1, 2) signature).
inline AnovaResult rm_anova(const AccuracyTable& table) {
  const std::size_t n = table.runs.size();
  if (n < 5)
    throw ValidationError("rm_anova: need at least 5 runs for a positive residual df (got " +
                          std::to_string(n) + ")");
  bool has_fwd = false, has_bwd = false;
  std::unordered_set<double> sizes;
  for (const auto& run : table.runs) {
    if (run.correct.size() != table.item_ids.size())
      throw ValidationError("rm_anova: run '" + run.run_id +
                            "' does not cover the shared item set");
    (run.direction == Orientation::kForward ? has_fwd : has_bwd) = true;
    sizes.insert(run.size);
  }
  if (!has_fwd || !has_bwd)
    throw ValidationError("rm_anova: both directions must be present");
  if (sizes.size() < 2) throw ValidationError("rm_anova: need at least 2 distinct sizes");

  Eigen::MatrixXd X(n, 4);
  Eigen::VectorXd y(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& run = table.runs[i];
    const double dir = run.direction == Orientation::kBackward ? 1.0 : 0.0;
    X(static_cast<Eigen::Index>(i), 0) = 1.0;
    X(static_cast<Eigen::Index>(i), 1) = dir;
    X(static_cast<Eigen::Index>(i), 2) = run.size;
    X(static_cast<Eigen::Index>(i), 3) = dir * run.size;
    const double acc =
        std::accumulate(run.correct.begin(), run.correct.end(), 0.0) /
        static_cast<double>(run.correct.size());
    y(static_cast<Eigen::Index>(i)) = acc;
  }

  AnovaResult result;
  result.df2 = n - 4;

  if (y.maxCoeff() == y.minCoeff()) {
    // No variance in accuracies: every effect is exactly zero.
    result.direction = result.size = result.interaction = AnovaEffect{0.0, 1.0};
    return result;
  }

  const Eigen::MatrixXd xtx = X.transpose() * X;
  Eigen::FullPivLU<Eigen::MatrixXd> lu(xtx);
  if (!lu.isInvertible())
    throw ValidationError("rm_anova: singular design (degenerate direction/size coding)");
  const Eigen::MatrixXd xtx_inv = lu.inverse();
  const Eigen::VectorXd beta = xtx_inv * (X.transpose() * y);
  const double rss = (y - X * beta).squaredNorm();
  const double sigma2 = rss / static_cast<double>(result.df2);

  auto effect = [&](int j) {
    const double var = sigma2 * xtx_inv(j, j);
    AnovaEffect e;
    if (var == 0.0) {
      e.f = beta(j) == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    } else {
      e.f = beta(j) * beta(j) / var;
    }
    e.p = f_upper_p(e.f, 1.0, static_cast<double>(result.df2));
    return e;
  };
  result.direction = effect(1);
  result.size = effect(2);
  result.interaction = effect(3);
  return result;
}

// ---------------------------------------------------------------------------
// Correlation summary across model runs and humans.
// ---------------------------------------------------------------------------

struct GroupStat {
  double mean = 0.0;
  std::optional<double> sd;  // absent when fewer than 2 pairs
  std::size_t pairs = 0;
};

struct CorrelationSummary {
  std::vector<std::string> labels;                  // model sources, then "human" if present
  std::vector<std::vector<double>> matrix;          // symmetric, unit diagonal
  std::optional<GroupStat> model_model;
  std::optional<GroupStat> forward_human;
  std::optional<GroupStat> backward_human;
};

namespace stats_detail {

inline GroupStat summarize(const std::vector<double>& values) {
  GroupStat g;
  g.pairs = values.size();
  if (values.empty()) return g;
  g.mean = std::accumulate(values.begin(), values.end(), 0.0) /
           static_cast<double>(values.size());
  if (values.size() >= 2) {
    double ss = 0.0;
    for (double v : values) ss += (v - g.mean) * (v - g.mean);
    g.sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return g;
}

}  // namespace stats_detail

/// Pairwise Spearman matrix over model difficulty vectors (plus the
/// human vector when given), restricted to the items shared by all
/// sources, with grouped statistics over the off-diagonal entries.
inline CorrelationSummary correlation_summary(const std::vector<DifficultyVector>& models,
                                              const DifficultyVector* human = nullptr) {
  if (models.size() < 2)
    throw ValidationError("correlation_summary: need at least 2 model vectors");

  // Shared item order: the first model's ids filtered to those present
  // in every other source.
  std::vector<std::string> shared = models[0].item_ids;
  auto filter_to = [&shared](const DifficultyVector& v) {
    std::unordered_set<std::string> ids(v.item_ids.begin(), v.item_ids.end());
    std::vector<std::string> next;
    next.reserve(shared.size());
    for (const auto& id : shared)
      if (ids.contains(id)) next.push_back(id);
    shared = std::move(next);
  };
  for (std::size_t i = 1; i < models.size(); ++i) filter_to(models[i]);
  if (human) filter_to(*human);
  if (shared.size() < 3)
    throw ValidationError("correlation_summary: fewer than 3 items shared by all sources");

  std::vector<DifficultyVector> aligned;
  aligned.reserve(models.size() + 1);
  for (const auto& m : models) aligned.push_back(restrict_to(m, shared));
  if (human) aligned.push_back(restrict_to(*human, shared));

  CorrelationSummary summary;
  const std::size_t n = aligned.size();
  summary.labels.reserve(n);
  for (const auto& v : aligned) summary.labels.push_back(v.source);
  summary.matrix.assign(n, std::vector<double>(n, 1.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double rho = spearman(aligned[i], aligned[j]);
      summary.matrix[i][j] = rho;
      summary.matrix[j][i] = rho;
    }

  std::vector<double> mm, fh, bh;
  const std::size_t n_models = models.size();
  for (std::size_t i = 0; i < n_models; ++i)
    for (std::size_t j = i + 1; j < n_models; ++j) mm.push_back(summary.matrix[i][j]);
  if (human) {
    for (std::size_t i = 0; i < n_models; ++i) {
      if (!aligned[i].direction) continue;
      const double rho = summary.matrix[i][n_models];
      (*aligned[i].direction == Orientation::kForward ? fh : bh).push_back(rho);
    }
  }
  summary.model_model = stats_detail::summarize(mm);
  if (human) {
    if (!fh.empty()) summary.forward_human = stats_detail::summarize(fh);
    if (!bh.empty()) summary.backward_human = stats_detail::summarize(bh);
  }
  return summary;
}

}  // namespace revlm
