#include "poisonlab/defense.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "poisonlab/csv.hpp"
#include "poisonlab/rng.hpp"

namespace poisonlab {

namespace {

struct DetOffsets {
  std::size_t cw = 0, cb = 0, ow = 0, ob = 0, total = 0;
};

DetOffsets det_layout(const DetectorParams& d) {
  const auto P = static_cast<std::size_t>(d.probes);
  const auto C = static_cast<std::size_t>(d.channels);
  const auto K = static_cast<std::size_t>(d.kernel);
  DetOffsets o;
  o.cw = 0;
  o.cb = o.cw + C * K * P;
  o.ow = o.cb + C;
  o.ob = o.ow + C;
  o.total = o.ob + 1;
  return o;
}

struct DetFwd {
  int frames = 0;
  std::vector<double> xn;    // frames * probes
  std::vector<double> h;     // frames * channels (post-tanh)
  std::vector<double> pool;  // channels
  double logit = 0;
};

void det_forward(const DetectorParams& d, const Features& f, DetFwd& fw) {
  const DetOffsets o = det_layout(d);
  if (d.w.size() != o.total)
    throw std::runtime_error("detector parameter size mismatch");
  const int F = f.frames;
  const int P = d.probes;
  const int C = d.channels;
  const int K = d.kernel;
  fw.frames = F;
  fw.xn.resize(f.x.size());
  for (std::size_t i = 0; i < f.x.size(); ++i)
    fw.xn[i] = (f.x[i] + kFeatNormShift) * kFeatNormScale;

  fw.h.assign(static_cast<std::size_t>(F) * C, 0.0);
  for (int t = 0; t < F; ++t)
    for (int c = 0; c < C; ++c) {
      double acc = d.w[o.cb + static_cast<std::size_t>(c)];
      for (int dd = 0; dd < K; ++dd) {
        int tt = t - (K - 1) + dd;
        if (tt < 0) continue;
        const double* row = fw.xn.data() + static_cast<std::size_t>(tt) * P;
        const double* wr =
            d.w.data() + o.cw + (static_cast<std::size_t>(c) * K + dd) * P;
        for (int p = 0; p < P; ++p) acc += row[p] * wr[p];
      }
      fw.h[static_cast<std::size_t>(t) * C + c] = std::tanh(acc);
    }

  fw.pool.assign(C, 0.0);
  for (int t = 0; t < F; ++t)
    for (int c = 0; c < C; ++c)
      fw.pool[c] += fw.h[static_cast<std::size_t>(t) * C + c];
  for (int c = 0; c < C; ++c) fw.pool[c] /= F;

  double logit = d.w[o.ob];
  for (int c = 0; c < C; ++c) logit += d.w[o.ow + static_cast<std::size_t>(c)] * fw.pool[c];
  fw.logit = logit;
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

// Stable binary cross-entropy from the logit.
double bce(double logit, double y) {
  return std::max(logit, 0.0) + std::log1p(std::exp(-std::abs(logit))) - y * logit;
}

double det_loss_grad(const DetectorParams& d, const Features& f, double y,
                     std::vector<double>& grad) {
  const DetOffsets o = det_layout(d);
  DetFwd fw;
  det_forward(d, f, fw);
  const int F = fw.frames;
  const int P = d.probes;
  const int C = d.channels;
  const int K = d.kernel;

  grad.assign(o.total, 0.0);
  double dlogit = sigmoid(fw.logit) - y;
  grad[o.ob] = dlogit;
  std::vector<double> dpool(C);
  for (int c = 0; c < C; ++c) {
    grad[o.ow + static_cast<std::size_t>(c)] = dlogit * fw.pool[c];
    dpool[c] = dlogit * d.w[o.ow + static_cast<std::size_t>(c)];
  }
  for (int t = 0; t < F; ++t)
    for (int c = 0; c < C; ++c) {
      double h = fw.h[static_cast<std::size_t>(t) * C + c];
      double da = (dpool[c] / F) * (1.0 - h * h);
      if (da == 0.0) continue;
      grad[o.cb + static_cast<std::size_t>(c)] += da;
      for (int dd = 0; dd < K; ++dd) {
        int tt = t - (K - 1) + dd;
        if (tt < 0) continue;
        const double* row = fw.xn.data() + static_cast<std::size_t>(tt) * P;
        double* gw =
            grad.data() + o.cw + (static_cast<std::size_t>(c) * K + dd) * P;
        for (int p = 0; p < P; ++p) gw[p] += da * row[p];
      }
    }
  return bce(fw.logit, y);
}

}  // namespace

std::size_t DetectorParams::param_count() const { return det_layout(*this).total; }

DetectorParams init_detector(std::uint64_t seed) {
  DetectorParams d;
  const DetOffsets o = det_layout(d);
  d.w.assign(o.total, 0.0);
  Rng rng = derive_rng(seed, "detector-init");
  double s_conv = 1.0 / std::sqrt(static_cast<double>(d.probes * d.kernel));
  for (std::size_t i = o.cw; i < o.cb; ++i) d.w[i] = uniform_range(rng, -s_conv, s_conv);
  double s_out = 1.0 / std::sqrt(static_cast<double>(d.channels));
  for (std::size_t i = o.ow; i < o.ob; ++i) d.w[i] = uniform_range(rng, -s_out, s_out);
  return d;
}

DetectorParams train_detector(const std::vector<const Waveform*>& benign,
                              const std::vector<const Waveform*>& poisoned,
                              const TrainConfig& cfg) {
  if (benign.empty() || poisoned.empty())
    throw std::runtime_error("train_detector: empty class");
  if (cfg.epochs <= 0 || cfg.batch_size <= 0)
    throw std::runtime_error("train_detector: bad hyperparameters");

  DetectorParams d = init_detector(cfg.seed);
  std::vector<Features> feats;
  std::vector<double> labels;
  for (const Waveform* w : benign) {
    feats.push_back(compute_features(*w));
    labels.push_back(0.0);
  }
  for (const Waveform* w : poisoned) {
    feats.push_back(compute_features(*w));
    labels.push_back(1.0);
  }
  const std::size_t n = feats.size();
  std::vector<double> vel(d.w.size(), 0.0), gsum(d.w.size()), g;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = derive_rng(cfg.seed, "detector-train");
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_in_place(order, rng);
    for (std::size_t start = 0; start < n;
         start += static_cast<std::size_t>(cfg.batch_size)) {
      std::size_t end = std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
      std::fill(gsum.begin(), gsum.end(), 0.0);
      for (std::size_t b = start; b < end; ++b) {
        std::size_t i = order[b];
        det_loss_grad(d, feats[i], labels[i], g);
        for (std::size_t k = 0; k < gsum.size(); ++k) gsum[k] += g[k];
      }
      double inv = 1.0 / static_cast<double>(end - start);
      for (std::size_t k = 0; k < d.w.size(); ++k) {
        vel[k] = cfg.momentum * vel[k] - cfg.learning_rate * gsum[k] * inv;
        d.w[k] += vel[k];
      }
    }
  }
  return d;
}

double detector_score(const DetectorParams& d, const Waveform& w) {
  DetFwd fw;
  Features f = compute_features(w);
  det_forward(d, f, fw);
  return sigmoid(fw.logit);
}

std::unordered_map<std::string, double> score(const DetectorParams& d,
                                              const Dataset& ds) {
  std::unordered_map<std::string, double> out;
  out.reserve(ds.utterances.size());
  for (const auto& u : ds.utterances) out[u.id] = detector_score(d, u.wave);
  return out;
}

double auc(const std::vector<double>& scores, const std::vector<bool>& is_poison) {
  if (scores.size() != is_poison.size())
    throw std::runtime_error("auc: size mismatch");
  std::size_t n_pos = 0, n_neg = 0;
  for (bool b : is_poison) (b ? n_pos : n_neg)++;
  if (n_pos == 0 || n_neg == 0)
    throw std::runtime_error("auc: both classes required");

  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Average ranks over tie groups (1-based ranks).
  double rank_pos_sum = 0.0;
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k)
      if (is_poison[idx[k]]) rank_pos_sum += avg_rank;
    i = j;
  }
  double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  return (rank_pos_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

double auc(const std::unordered_map<std::string, double>& scores,
           const std::unordered_set<std::string>& poisoned_ids) {
  std::vector<std::pair<std::string, double>> items(scores.begin(), scores.end());
  std::sort(items.begin(), items.end());  // id order, for determinism
  std::vector<double> s;
  std::vector<bool> y;
  for (const auto& [id, sc] : items) {
    s.push_back(sc);
    y.push_back(poisoned_ids.count(id) > 0);
  }
  return auc(s, y);
}

FilterResult filter_dataset(const Dataset& ds, const DetectorParams& d,
                            double threshold) {
  if (threshold < 0.0 || threshold > 1.0)
    throw std::runtime_error("filter_dataset: threshold must be in [0,1]");
  FilterResult out;
  out.retained.vocab = ds.vocab;
  for (const auto& u : ds.utterances) {
    if (u.split == Split::Train) {
      double s = detector_score(d, u.wave);
      if (s >= threshold) {
        out.removed.push_back(u.id);
        out.removed_scores.push_back(s);
        continue;
      }
    }
    out.retained.utterances.push_back(u);
  }
  return out;
}

double threshold_for_fpr(const DetectorParams& d,
                         const std::vector<const Waveform*>& benign, double fpr) {
  if (benign.empty()) throw std::runtime_error("threshold_for_fpr: empty benign set");
  if (fpr < 0.0 || fpr > 1.0) throw std::runtime_error("threshold_for_fpr: bad fpr");
  std::vector<double> s;
  s.reserve(benign.size());
  for (const Waveform* w : benign) s.push_back(detector_score(d, *w));
  std::sort(s.begin(), s.end());
  std::size_t n = s.size();
  std::size_t allow = static_cast<std::size_t>(std::floor(fpr * static_cast<double>(n)));
  if (allow >= n) return 0.0;
  std::size_t cut = n - allow;  // first removed index (everything >= threshold goes)
  if (cut == 0) return 0.0;
  if (cut >= n) return 1.0;
  // Midpoint separates the retained/removed scores when they differ; a tie
  // across the boundary keeps the whole tie group, so the achieved rate
  // never exceeds the request.
  return s[cut - 1] < s[cut] ? 0.5 * (s[cut - 1] + s[cut])
                             : std::nextafter(s[cut], 2.0);
}

Dataset perfect_filter(const Dataset& ds, const std::vector<PoisonRecord>& records) {
  std::unordered_set<std::string> drop;
  for (const auto& r : records) {
    if (!ds.find(r.id))
      throw std::runtime_error("perfect_filter: record references unknown id " + r.id);
    drop.insert(r.id);
  }
  Dataset out;
  out.vocab = ds.vocab;
  for (const auto& u : ds.utterances)
    if (!drop.count(u.id)) out.utterances.push_back(u);
  return out;
}

namespace {

struct DenOffsets {
  std::size_t A = 0, a = 0, B = 0, total = 0;
};

DenOffsets den_layout(const DenoiserParams& d) {
  const auto F = static_cast<std::size_t>(d.frame);
  const auto H = static_cast<std::size_t>(d.hidden);
  DenOffsets o;
  o.A = 0;
  o.a = o.A + H * F;
  o.B = o.a + H;
  o.total = o.B + F * H;
  return o;
}

// out = x - B tanh(A x + a); returns hidden activations for backprop.
void den_frame_forward(const DenoiserParams& d, const double* x, double* t,
                       double* out) {
  const DenOffsets o = den_layout(d);
  const int F = d.frame;
  const int H = d.hidden;
  for (int h = 0; h < H; ++h) {
    double acc = d.w[o.a + static_cast<std::size_t>(h)];
    const double* Ar = d.w.data() + o.A + static_cast<std::size_t>(h) * F;
    for (int i = 0; i < F; ++i) acc += Ar[i] * x[i];
    t[h] = std::tanh(acc);
  }
  for (int i = 0; i < F; ++i) {
    double acc = 0.0;
    const double* Br = d.w.data() + o.B + static_cast<std::size_t>(i) * H;
    for (int h = 0; h < H; ++h) acc += Br[h] * t[h];
    out[i] = x[i] - acc;
  }
}

}  // namespace

std::size_t DenoiserParams::param_count() const { return den_layout(*this).total; }

DenoiserParams init_denoiser(std::uint64_t seed) {
  DenoiserParams d;
  const DenOffsets o = den_layout(d);
  d.w.assign(o.total, 0.0);
  // B stays zero so the fresh denoiser is an exact identity; A is random so
  // B receives gradient on the first step.
  Rng rng = derive_rng(seed, "denoiser-init");
  double s = 1.0 / std::sqrt(static_cast<double>(d.frame));
  for (std::size_t i = o.A; i < o.a; ++i) d.w[i] = uniform_range(rng, -s, s);
  return d;
}

DenoiserParams train_denoiser(const std::vector<WavePair>& pairs,
                              const TrainConfig& cfg) {
  if (pairs.empty()) throw std::runtime_error("train_denoiser: no pairs");
  if (cfg.epochs <= 0 || cfg.batch_size <= 0)
    throw std::runtime_error("train_denoiser: bad hyperparameters");

  DenoiserParams d = init_denoiser(cfg.seed);
  const DenOffsets o = den_layout(d);
  const int F = d.frame;
  const int H = d.hidden;

  // Materialize frame pairs with the analysis framing.
  std::vector<std::vector<double>> xs, cs;
  for (const auto& p : pairs) {
    if (p.noisy.samples.size() != p.clean.samples.size())
      throw std::runtime_error("train_denoiser: length mismatch in pair");
    if (p.noisy.samples.size() < static_cast<std::size_t>(F)) continue;
    std::size_t frames = 1 + (p.noisy.samples.size() - static_cast<std::size_t>(F)) /
                                 static_cast<std::size_t>(kHopLen);
    for (std::size_t t = 0; t < frames; ++t) {
      std::size_t off = t * static_cast<std::size_t>(kHopLen);
      xs.emplace_back(p.noisy.samples.begin() + static_cast<std::ptrdiff_t>(off),
                      p.noisy.samples.begin() + static_cast<std::ptrdiff_t>(off) + F);
      cs.emplace_back(p.clean.samples.begin() + static_cast<std::ptrdiff_t>(off),
                      p.clean.samples.begin() + static_cast<std::ptrdiff_t>(off) + F);
    }
  }
  if (xs.empty()) throw std::runtime_error("train_denoiser: no full frames in pairs");

  const std::size_t n = xs.size();
  std::vector<double> vel(d.w.size(), 0.0), gsum(d.w.size());
  std::vector<double> t(H), out(F), g(d.w.size());
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = derive_rng(cfg.seed, "denoiser-train");
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_in_place(order, rng);
    for (std::size_t start = 0; start < n;
         start += static_cast<std::size_t>(cfg.batch_size)) {
      std::size_t end = std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
      std::fill(gsum.begin(), gsum.end(), 0.0);
      for (std::size_t b = start; b < end; ++b) {
        const double* x = xs[order[b]].data();
        const double* c = cs[order[b]].data();
        den_frame_forward(d, x, t.data(), out.data());
        std::fill(g.begin(), g.end(), 0.0);
        std::vector<double> dt(H, 0.0);
        for (int i = 0; i < F; ++i) {
          double dout = 2.0 * (out[i] - c[i]) / F;
          if (dout == 0.0) continue;
          double* gB = g.data() + o.B + static_cast<std::size_t>(i) * H;
          const double* Br = d.w.data() + o.B + static_cast<std::size_t>(i) * H;
          for (int h = 0; h < H; ++h) {
            gB[h] -= dout * t[h];
            dt[h] -= dout * Br[h];
          }
        }
        for (int h = 0; h < H; ++h) {
          double da = dt[h] * (1.0 - t[h] * t[h]);
          if (da == 0.0) continue;
          g[o.a + static_cast<std::size_t>(h)] += da;
          double* gA = g.data() + o.A + static_cast<std::size_t>(h) * F;
          for (int i = 0; i < F; ++i) gA[i] += da * x[i];
        }
        for (std::size_t k = 0; k < gsum.size(); ++k) gsum[k] += g[k];
      }
      double inv = 1.0 / static_cast<double>(end - start);
      for (std::size_t k = 0; k < d.w.size(); ++k) {
        vel[k] = cfg.momentum * vel[k] - cfg.learning_rate * gsum[k] * inv;
        d.w[k] += vel[k];
      }
    }
  }
  return d;
}

Waveform denoise(const DenoiserParams& d, const Waveform& w) {
  Waveform out = w;
  const int F = d.frame;
  if (w.samples.size() < static_cast<std::size_t>(F)) return out;
  std::size_t frames = 1 + (w.samples.size() - static_cast<std::size_t>(F)) /
                               static_cast<std::size_t>(kHopLen);
  std::vector<double> t(static_cast<std::size_t>(d.hidden)), y(static_cast<std::size_t>(F));
  for (std::size_t tf = 0; tf < frames; ++tf) {
    std::size_t off = tf * static_cast<std::size_t>(kHopLen);
    den_frame_forward(d, w.samples.data() + off, t.data(), y.data());
    // Disjoint stitching: each frame owns its first hop, the last frame
    // owns its full span; anything past the last frame passes through.
    std::size_t keep =
        tf + 1 < frames ? static_cast<std::size_t>(kHopLen) : static_cast<std::size_t>(F);
    for (std::size_t i = 0; i < keep; ++i) out.samples[off + i] = y[i];
  }
  return out;
}

void save_detector(const DetectorParams& d, const std::string& path) {
  nlohmann::json j;
  j["schema"] = "poisonlab-detector-v1";
  j["probes"] = d.probes;
  j["channels"] = d.channels;
  j["kernel"] = d.kernel;
  j["weights"] = d.w;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_detector: cannot write " + path);
  out << j.dump(1, '\t') << "\n";
}

DetectorParams load_detector(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_detector: cannot open " + path);
  nlohmann::json j;
  in >> j;
  if (j.value("schema", "") != "poisonlab-detector-v1")
    throw std::runtime_error("load_detector: unknown schema in " + path);
  DetectorParams d;
  d.probes = j["probes"].get<int>();
  d.channels = j["channels"].get<int>();
  d.kernel = j["kernel"].get<int>();
  d.w = j["weights"].get<std::vector<double>>();
  if (d.w.size() != d.param_count())
    throw std::runtime_error("load_detector: weight count mismatch");
  return d;
}

void save_denoiser(const DenoiserParams& d, const std::string& path) {
  nlohmann::json j;
  j["schema"] = "poisonlab-denoiser-v1";
  j["frame"] = d.frame;
  j["hidden"] = d.hidden;
  j["weights"] = d.w;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_denoiser: cannot write " + path);
  out << j.dump(1, '\t') << "\n";
}

DenoiserParams load_denoiser(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_denoiser: cannot open " + path);
  nlohmann::json j;
  in >> j;
  if (j.value("schema", "") != "poisonlab-denoiser-v1")
    throw std::runtime_error("load_denoiser: unknown schema in " + path);
  DenoiserParams d;
  d.frame = j["frame"].get<int>();
  d.hidden = j["hidden"].get<int>();
  d.w = j["weights"].get<std::vector<double>>();
  if (d.w.size() != d.param_count())
    throw std::runtime_error("load_denoiser: weight count mismatch");
  return d;
}

void write_filter_report(const std::vector<std::string>& removed,
                         const std::vector<double>& scores,
                         const std::string& path) {
  if (removed.size() != scores.size())
    throw std::runtime_error("write_filter_report: id/score size mismatch");
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_filter_report: cannot write " + path);
  f << "id,score\n";
  for (std::size_t i = 0; i < removed.size(); ++i)
    f << removed[i] << "," << num_to_string(scores[i]) << "\n";
}

void write_filter_report(const FilterResult& fr, const std::string& path) {
  write_filter_report(fr.removed, fr.removed_scores, path);
}

}  // namespace poisonlab
