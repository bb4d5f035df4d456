#include "poisonlab/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "poisonlab/rng.hpp"

namespace poisonlab {

namespace {

constexpr double kFeatShift = kFeatNormShift;
constexpr double kFeatScale = kFeatNormScale;

const std::vector<double>& cos_table() {
  static const std::vector<double> table = [] {
    std::vector<double> t(kNumProbes * kFrameLen);
    for (int j = 0; j < kNumProbes; ++j) {
      double w = 2.0 * M_PI * kProbeFreqs[static_cast<std::size_t>(j)] / 16000.0;
      for (int i = 0; i < kFrameLen; ++i)
        t[static_cast<std::size_t>(j) * kFrameLen + i] = std::cos(w * i);
    }
    return t;
  }();
  return table;
}

int frame_count(const Waveform& w) {
  if (w.sample_rate != 16000)
    throw std::runtime_error("model frontend expects 16000 Hz input");
  if (w.samples.size() < static_cast<std::size_t>(kFrameLen))
    throw std::runtime_error("waveform shorter than one frame");
  return 1 + static_cast<int>((w.samples.size() - kFrameLen) / kHopLen);
}

// p_j(t) for every frame; four accumulators keep the dot product fast
// without changing results between runs.
std::vector<double> project_frames(const Waveform& w, int frames) {
  const auto& ct = cos_table();
  std::vector<double> p(static_cast<std::size_t>(frames) * kNumProbes);
  for (int t = 0; t < frames; ++t) {
    const double* s = w.samples.data() + static_cast<std::size_t>(t) * kHopLen;
    for (int j = 0; j < kNumProbes; ++j) {
      const double* c = ct.data() + static_cast<std::size_t>(j) * kFrameLen;
      double a0 = 0, a1 = 0, a2 = 0, a3 = 0;
      for (int i = 0; i < kFrameLen; i += 4) {
        a0 += s[i] * c[i];
        a1 += s[i + 1] * c[i + 1];
        a2 += s[i + 2] * c[i + 2];
        a3 += s[i + 3] * c[i + 3];
      }
      p[static_cast<std::size_t>(t) * kNumProbes + j] =
          (2.0 / kFrameLen) * ((a0 + a1) + (a2 + a3));
    }
  }
  return p;
}

struct Offsets {
  std::size_t c1w = 0, c1b = 0, c2w = 0, c2b = 0;
  std::vector<std::size_t> hw, hb;
  std::size_t total = 0;
};

Offsets layout(const ModelShape& s) {
  const auto P = static_cast<std::size_t>(s.probes);
  const auto C = static_cast<std::size_t>(s.channels);
  const auto K = static_cast<std::size_t>(s.kernel);
  Offsets o;
  o.c1w = 0;
  o.c1b = o.c1w + C * P * K;
  o.c2w = o.c1b + C;
  o.c2b = o.c2w + C * C * K;
  std::size_t pos = o.c2b + C;
  for (int h : s.heads) {
    o.hw.push_back(pos);
    pos += static_cast<std::size_t>(h) * C;
    o.hb.push_back(pos);
    pos += static_cast<std::size_t>(h);
  }
  o.total = pos;
  return o;
}

// Weight layout within a conv block: w[out][tap][in], taps ordered oldest
// to current so tap d reads frame t - (kernel-1) + d.
struct Fwd {
  int frames = 0;
  std::vector<double> xn;                      // frames * probes
  std::vector<double> a1, h1, a2, h2;          // frames * channels
  std::vector<double> pool;                    // channels
  std::array<std::vector<double>, 3> logits;
  std::array<std::vector<double>, 3> probs;
};

void conv_forward(const double* w, const double* b, const double* in, int frames,
                  int cin, int cout, int kernel, double* out) {
  for (int t = 0; t < frames; ++t) {
    for (int c = 0; c < cout; ++c) {
      double acc = b[c];
      for (int d = 0; d < kernel; ++d) {
        int tt = t - (kernel - 1) + d;
        if (tt < 0) continue;
        const double* row = in + static_cast<std::size_t>(tt) * cin;
        const double* wr =
            w + (static_cast<std::size_t>(c) * kernel + d) * cin;
        double a0 = 0, a1 = 0, a2 = 0, a3 = 0;
        for (int i = 0; i < cin; i += 4) {
          a0 += row[i] * wr[i];
          a1 += row[i + 1] * wr[i + 1];
          a2 += row[i + 2] * wr[i + 2];
          a3 += row[i + 3] * wr[i + 3];
        }
        acc += (a0 + a1) + (a2 + a3);
      }
      out[static_cast<std::size_t>(t) * cout + c] = acc;
    }
  }
}

void run_forward(const ModelParams& m, const Features& f, Fwd& fw) {
  const auto& s = m.shape;
  if (f.probes != s.probes) throw std::runtime_error("feature/probe mismatch");
  const Offsets o = layout(s);
  if (m.w.size() != o.total) throw std::runtime_error("parameter vector size mismatch");
  const int F = f.frames;
  const int C = s.channels;
  fw.frames = F;

  fw.xn.resize(f.x.size());
  for (std::size_t i = 0; i < f.x.size(); ++i)
    fw.xn[i] = (f.x[i] + kFeatShift) * kFeatScale;

  fw.a1.assign(static_cast<std::size_t>(F) * C, 0.0);
  conv_forward(m.w.data() + o.c1w, m.w.data() + o.c1b, fw.xn.data(), F, s.probes,
               C, s.kernel, fw.a1.data());
  fw.h1.resize(fw.a1.size());
  for (std::size_t i = 0; i < fw.a1.size(); ++i) fw.h1[i] = std::tanh(fw.a1[i]);

  fw.a2.assign(static_cast<std::size_t>(F) * C, 0.0);
  conv_forward(m.w.data() + o.c2w, m.w.data() + o.c2b, fw.h1.data(), F, C, C,
               s.kernel, fw.a2.data());
  fw.h2.resize(fw.a2.size());
  for (std::size_t i = 0; i < fw.a2.size(); ++i) fw.h2[i] = std::tanh(fw.a2[i]);

  fw.pool.assign(C, 0.0);
  for (int t = 0; t < F; ++t)
    for (int c = 0; c < C; ++c) fw.pool[c] += fw.h2[static_cast<std::size_t>(t) * C + c];
  for (int c = 0; c < C; ++c) fw.pool[c] /= F;

  for (std::size_t h = 0; h < s.heads.size(); ++h) {
    int nh = s.heads[h];
    fw.logits[h].assign(nh, 0.0);
    const double* W = m.w.data() + o.hw[h];
    const double* B = m.w.data() + o.hb[h];
    for (int k = 0; k < nh; ++k) {
      double acc = B[k];
      const double* wr = W + static_cast<std::size_t>(k) * C;
      for (int c = 0; c < C; ++c) acc += wr[c] * fw.pool[c];
      fw.logits[h][k] = acc;
    }
    double mx = *std::max_element(fw.logits[h].begin(), fw.logits[h].end());
    double z = 0;
    fw.probs[h].resize(nh);
    for (int k = 0; k < nh; ++k) {
      fw.probs[h][k] = std::exp(fw.logits[h][k] - mx);
      z += fw.probs[h][k];
    }
    for (int k = 0; k < nh; ++k) fw.probs[h][k] /= z;
  }
}

double head_ce(const Fwd& fw, int h, int y) {
  // -log softmax via the stored normalized probabilities' source terms:
  // recompute from logits for accuracy.
  const auto& z = fw.logits[static_cast<std::size_t>(h)];
  double mx = *std::max_element(z.begin(), z.end());
  double se = 0;
  for (double v : z) se += std::exp(v - mx);
  return (mx + std::log(se)) - z[static_cast<std::size_t>(y)];
}

void check_labels(const ModelShape& s, const SlotTriple& y) {
  const int vals[3] = {y.action, y.object, y.location};
  for (int h = 0; h < 3; ++h)
    if (vals[h] < 0 || vals[h] >= s.heads[static_cast<std::size_t>(h)])
      throw std::runtime_error("label out of vocab");
}

// Backward from per-head logit gradients dz down to parameters and
// (optionally) features.
void run_backward(const ModelParams& m, const Fwd& fw,
                  const std::array<std::vector<double>, 3>& dz,
                  std::vector<double>* grad_w, std::vector<double>* grad_x) {
  const auto& s = m.shape;
  const Offsets o = layout(s);
  const int F = fw.frames;
  const int C = s.channels;
  const int K = s.kernel;

  std::vector<double>* gw = grad_w;
  if (gw) gw->assign(o.total, 0.0);

  std::vector<double> dpool(C, 0.0);
  for (std::size_t h = 0; h < s.heads.size(); ++h) {
    int nh = s.heads[h];
    const double* W = m.w.data() + o.hw[h];
    for (int k = 0; k < nh; ++k) {
      double g = dz[h][static_cast<std::size_t>(k)];
      if (gw) {
        double* gW = gw->data() + o.hw[h] + static_cast<std::size_t>(k) * C;
        for (int c = 0; c < C; ++c) gW[c] += g * fw.pool[c];
        (*gw)[o.hb[h] + static_cast<std::size_t>(k)] += g;
      }
      const double* wr = W + static_cast<std::size_t>(k) * C;
      for (int c = 0; c < C; ++c) dpool[c] += g * wr[c];
    }
  }

  std::vector<double> da2(static_cast<std::size_t>(F) * C);
  for (int t = 0; t < F; ++t)
    for (int c = 0; c < C; ++c) {
      std::size_t i = static_cast<std::size_t>(t) * C + c;
      double dh2 = dpool[c] / F;
      da2[i] = dh2 * (1.0 - fw.h2[i] * fw.h2[i]);
    }

  std::vector<double> dh1(static_cast<std::size_t>(F) * C, 0.0);
  for (int t = 0; t < F; ++t)
    for (int c = 0; c < C; ++c) {
      double g = da2[static_cast<std::size_t>(t) * C + c];
      if (g == 0.0) continue;
      if (gw) (*gw)[o.c2b + static_cast<std::size_t>(c)] += g;
      for (int d = 0; d < K; ++d) {
        int tt = t - (K - 1) + d;
        if (tt < 0) continue;
        const double* h1row = fw.h1.data() + static_cast<std::size_t>(tt) * C;
        const double* wr =
            m.w.data() + o.c2w + (static_cast<std::size_t>(c) * K + d) * C;
        double* dh1row = dh1.data() + static_cast<std::size_t>(tt) * C;
        if (gw) {
          double* gwr =
              gw->data() + o.c2w + (static_cast<std::size_t>(c) * K + d) * C;
          for (int i = 0; i < C; ++i) gwr[i] += g * h1row[i];
        }
        for (int i = 0; i < C; ++i) dh1row[i] += g * wr[i];
      }
    }

  std::vector<double> da1(static_cast<std::size_t>(F) * C);
  for (std::size_t i = 0; i < da1.size(); ++i)
    da1[i] = dh1[i] * (1.0 - fw.h1[i] * fw.h1[i]);

  const int P = s.probes;
  std::vector<double> dxn;
  if (grad_x) dxn.assign(static_cast<std::size_t>(F) * P, 0.0);
  for (int t = 0; t < F; ++t)
    for (int c = 0; c < C; ++c) {
      double g = da1[static_cast<std::size_t>(t) * C + c];
      if (g == 0.0) continue;
      if (gw) (*gw)[o.c1b + static_cast<std::size_t>(c)] += g;
      for (int d = 0; d < K; ++d) {
        int tt = t - (K - 1) + d;
        if (tt < 0) continue;
        const double* xrow = fw.xn.data() + static_cast<std::size_t>(tt) * P;
        if (gw) {
          double* gwr =
              gw->data() + o.c1w + (static_cast<std::size_t>(c) * K + d) * P;
          for (int i = 0; i < P; ++i) gwr[i] += g * xrow[i];
        }
        if (grad_x) {
          const double* wr =
              m.w.data() + o.c1w + (static_cast<std::size_t>(c) * K + d) * P;
          double* dxrow = dxn.data() + static_cast<std::size_t>(tt) * P;
          for (int i = 0; i < P; ++i) dxrow[i] += g * wr[i];
        }
      }
    }
  if (grad_x) {
    grad_x->resize(dxn.size());
    for (std::size_t i = 0; i < dxn.size(); ++i) (*grad_x)[i] = dxn[i] * kFeatScale;
  }
}

SlotTriple labels_of(const Utterance& u) { return SlotTriple{u.action, u.object, u.location}; }

}  // namespace

Features compute_features(const Waveform& w) {
  int frames = frame_count(w);
  Features f;
  f.frames = frames;
  f.probes = kNumProbes;
  f.x = project_frames(w, frames);
  for (double& v : f.x) v = std::log(v * v + kFeatEps);
  return f;
}

std::size_t ModelShape::param_count() const { return layout(*this).total; }

ModelParams init_model(const SlotVocab& vocab, std::uint64_t seed) {
  ModelParams m;
  m.vocab = vocab;
  m.shape.heads = {static_cast<int>(vocab.actions.size()),
                   static_cast<int>(vocab.objects.size()),
                   static_cast<int>(vocab.locations.size())};
  for (int h : m.shape.heads)
    if (h < 1) throw std::runtime_error("init_model: empty slot vocabulary");
  const Offsets o = layout(m.shape);
  m.w.assign(o.total, 0.0);
  Rng rng = derive_rng(seed, "init");
  auto fill_uniform = [&](std::size_t from, std::size_t count, double scale) {
    for (std::size_t i = 0; i < count; ++i)
      m.w[from + i] = uniform_range(rng, -scale, scale);
  };
  const auto P = static_cast<std::size_t>(m.shape.probes);
  const auto C = static_cast<std::size_t>(m.shape.channels);
  const auto K = static_cast<std::size_t>(m.shape.kernel);
  fill_uniform(o.c1w, C * P * K, 1.0 / std::sqrt(static_cast<double>(P * K)));
  fill_uniform(o.c2w, C * C * K, 1.0 / std::sqrt(static_cast<double>(C * K)));
  for (std::size_t h = 0; h < m.shape.heads.size(); ++h)
    fill_uniform(o.hw[h],
                 static_cast<std::size_t>(m.shape.heads[h]) * C,
                 1.0 / std::sqrt(static_cast<double>(C)));
  return m;
}

std::array<std::vector<double>, 3> forward(const ModelParams& m, const Waveform& w) {
  Fwd fw;
  Features f = compute_features(w);
  run_forward(m, f, fw);
  return fw.logits;
}

double loss_features(const ModelParams& m, const Features& f, const SlotTriple& y) {
  check_labels(m.shape, y);
  Fwd fw;
  run_forward(m, f, fw);
  return head_ce(fw, 0, y.action) + head_ce(fw, 1, y.object) + head_ce(fw, 2, y.location);
}

double loss(const ModelParams& m, const Waveform& w, const SlotTriple& y) {
  return loss_features(m, compute_features(w), y);
}

double loss_grad(const ModelParams& m, const Features& f, const SlotTriple& y,
                 std::vector<double>* grad_w, std::vector<double>* grad_x) {
  check_labels(m.shape, y);
  Fwd fw;
  run_forward(m, f, fw);
  std::array<std::vector<double>, 3> dz;
  const int yy[3] = {y.action, y.object, y.location};
  for (int h = 0; h < 3; ++h) {
    int nh = m.shape.heads[static_cast<std::size_t>(h)];
    dz[static_cast<std::size_t>(h)].resize(nh);
    for (int k = 0; k < nh; ++k)
      dz[static_cast<std::size_t>(h)][static_cast<std::size_t>(k)] =
          fw.probs[static_cast<std::size_t>(h)][static_cast<std::size_t>(k)] -
          (k == yy[h] ? 1.0 : 0.0);
  }
  run_backward(m, fw, dz, grad_w, grad_x);
  return head_ce(fw, 0, y.action) + head_ce(fw, 1, y.object) + head_ce(fw, 2, y.location);
}

std::vector<double> grad_params(const ModelParams& m,
                                const std::vector<const Utterance*>& batch) {
  if (batch.empty()) throw std::runtime_error("grad_params: empty batch");
  std::vector<double> sum(m.w.size(), 0.0), g;
  for (const Utterance* u : batch) {
    Features f = compute_features(u->wave);
    loss_grad(m, f, labels_of(*u), &g, nullptr);
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += g[i];
  }
  for (double& v : sum) v /= static_cast<double>(batch.size());
  return sum;
}

std::vector<double> grad_input(const ModelParams& m, const Waveform& w, int slot,
                               int target_class) {
  if (slot < 0 || slot > 2) throw std::runtime_error("grad_input: bad slot");
  if (target_class < 0 || target_class >= m.shape.heads[static_cast<std::size_t>(slot)])
    throw std::runtime_error("grad_input: class out of vocab");
  Features f = compute_features(w);
  Fwd fw;
  run_forward(m, f, fw);

  // Only the designated head's cross-entropy contributes.
  std::array<std::vector<double>, 3> dz;
  for (int h = 0; h < 3; ++h)
    dz[static_cast<std::size_t>(h)].assign(
        static_cast<std::size_t>(m.shape.heads[static_cast<std::size_t>(h)]), 0.0);
  const auto& probs = fw.probs[static_cast<std::size_t>(slot)];
  for (std::size_t k = 0; k < probs.size(); ++k)
    dz[static_cast<std::size_t>(slot)][k] =
        probs[k] - (static_cast<int>(k) == target_class ? 1.0 : 0.0);

  std::vector<double> grad_x;
  run_backward(m, fw, dz, nullptr, &grad_x);

  // Chain through x = ln(p^2 + eps) and the frame projections.
  const int frames = fw.frames;
  std::vector<double> p = project_frames(w, frames);
  const auto& ct = cos_table();
  std::vector<double> ds(w.samples.size(), 0.0);
  for (int t = 0; t < frames; ++t) {
    double* dsrow = ds.data() + static_cast<std::size_t>(t) * kHopLen;
    for (int j = 0; j < kNumProbes; ++j) {
      std::size_t i = static_cast<std::size_t>(t) * kNumProbes + j;
      double pv = p[i];
      double dp = grad_x[i] * (2.0 * pv / (pv * pv + kFeatEps)) * (2.0 / kFrameLen);
      if (dp == 0.0) continue;
      const double* c = ct.data() + static_cast<std::size_t>(j) * kFrameLen;
      for (int n = 0; n < kFrameLen; ++n) dsrow[n] += dp * c[n];
    }
  }
  return ds;
}

SlotTriple predict(const ModelParams& m, const Waveform& w) {
  auto logits = forward(m, w);
  SlotTriple out;
  int* fields[3] = {&out.action, &out.object, &out.location};
  for (int h = 0; h < 3; ++h) {
    const auto& z = logits[static_cast<std::size_t>(h)];
    int best = 0;
    for (int k = 1; k < static_cast<int>(z.size()); ++k)
      if (z[static_cast<std::size_t>(k)] > z[static_cast<std::size_t>(best)]) best = k;
    *fields[h] = best;
  }
  return out;
}

std::unordered_map<std::string, double> per_sample_loss(
    const ModelParams& m, const std::vector<const Utterance*>& utts) {
  std::unordered_map<std::string, double> out;
  out.reserve(utts.size());
  for (const Utterance* u : utts)
    out[u->id] = loss(m, u->wave, labels_of(*u));
  return out;
}

TrainResult train(const SlotVocab& vocab, const std::vector<Utterance>& train_set,
                  const TrainConfig& cfg) {
  if (train_set.empty()) throw std::runtime_error("train: empty dataset");
  if (cfg.epochs <= 0 || cfg.batch_size <= 0 || cfg.learning_rate < 0 ||
      cfg.momentum < 0)
    throw std::runtime_error("train: bad hyperparameters");

  ModelParams m = init_model(vocab, cfg.seed);
  const std::size_t n = train_set.size();
  std::vector<Features> feats(n);
  std::vector<SlotTriple> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    feats[i] = compute_features(train_set[i].wave);
    labels[i] = labels_of(train_set[i]);
    check_labels(m.shape, labels[i]);
  }

  std::vector<double> vel(m.w.size(), 0.0), gsum(m.w.size()), g;
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  Rng rng = derive_rng(cfg.seed, "train");
  TrainResult res;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_in_place(order, rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg.batch_size)) {
      std::size_t end = std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
      std::fill(gsum.begin(), gsum.end(), 0.0);
      for (std::size_t b = start; b < end; ++b) {
        std::size_t i = order[b];
        epoch_loss += loss_grad(m, feats[i], labels[i], &g, nullptr);
        for (std::size_t k = 0; k < gsum.size(); ++k) gsum[k] += g[k];
      }
      double inv = 1.0 / static_cast<double>(end - start);
      for (std::size_t k = 0; k < m.w.size(); ++k) {
        vel[k] = cfg.momentum * vel[k] - cfg.learning_rate * gsum[k] * inv;
        m.w[k] += vel[k];
      }
    }
    res.loss_history.push_back(epoch_loss / static_cast<double>(n));
  }
  res.params = std::move(m);
  return res;
}

TrainResult train(const Dataset& ds, const TrainConfig& cfg) {
  std::vector<Utterance> tr;
  for (const auto& u : ds.utterances)
    if (u.split == Split::Train) tr.push_back(u);
  return train(ds.vocab, tr, cfg);
}

void save_model(const ModelParams& m, const std::string& path) {
  nlohmann::json j;
  j["schema"] = "poisonlab-model-v1";
  j["frame"] = kFrameLen;
  j["hop"] = kHopLen;
  j["probe_freqs"] = kProbeFreqs;
  j["shape"] = {{"probes", m.shape.probes},
                {"channels", m.shape.channels},
                {"kernel", m.shape.kernel},
                {"heads", m.shape.heads}};
  j["vocab"] = {{"actions", m.vocab.actions},
                {"objects", m.vocab.objects},
                {"locations", m.vocab.locations}};
  j["weights"] = m.w;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_model: cannot write " + path);
  out << j.dump(1, '\t') << "\n";
  if (!out) throw std::runtime_error("save_model: write failed " + path);
}

ModelParams load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_model: cannot open " + path);
  nlohmann::json j;
  in >> j;
  if (j.value("schema", "") != "poisonlab-model-v1")
    throw std::runtime_error("load_model: unknown schema in " + path);
  ModelParams m;
  m.shape.probes = j["shape"]["probes"].get<int>();
  m.shape.channels = j["shape"]["channels"].get<int>();
  m.shape.kernel = j["shape"]["kernel"].get<int>();
  m.shape.heads = j["shape"]["heads"].get<std::vector<int>>();
  m.vocab.actions = j["vocab"]["actions"].get<std::vector<std::string>>();
  m.vocab.objects = j["vocab"]["objects"].get<std::vector<std::string>>();
  m.vocab.locations = j["vocab"]["locations"].get<std::vector<std::string>>();
  m.w = j["weights"].get<std::vector<double>>();
  if (m.w.size() != m.shape.param_count())
    throw std::runtime_error("load_model: weight count mismatch in " + path);
  return m;
}

}  // namespace poisonlab
