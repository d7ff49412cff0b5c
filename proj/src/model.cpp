// Copyright 2026 The Grimm Authors
// SPDX-License-Identifier: Apache-2.0

#include "grimm/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

namespace grimm {

std::string_view to_string(ArchKind kind) {
  switch (kind) {
    case ArchKind::kGcn: return "gcn";
    case ArchKind::kGat: return "gat";
    case ArchKind::kSage: return "sage";
  }
  return "?";
}

ArchKind parse_arch_kind(std::string_view name) {
  if (name == "gcn" || name == "GCN") return ArchKind::kGcn;
  if (name == "gat" || name == "GAT") return ArchKind::kGat;
  if (name == "sage" || name == "SAGE" || name == "graphsage") return ArchKind::kSage;
  throw ConfigError("unknown architecture '" + std::string(name) + "'");
}

std::string_view to_string(Activation act) {
  return act == Activation::kSigmoid ? "sigmoid" : "relu";
}

Activation parse_activation(std::string_view name) {
  if (name == "sigmoid") return Activation::kSigmoid;
  if (name == "relu") return Activation::kRelu;
  throw ConfigError("unknown activation '" + std::string(name) + "'");
}

Activation ModelArch::activation(int layer) const {
  if (hidden_activations.empty()) return Activation::kSigmoid;
  return hidden_activations.at(static_cast<std::size_t>(layer - 1));
}

void ModelArch::validate() const {
  if (num_layers() < 2) throw ConfigError("a model needs at least 2 layers");
  for (auto d : layer_dims) {
    if (d <= 0) throw ConfigError("layer dimensions must be positive");
  }
  if (num_heads < 1) throw ConfigError("num_heads must be >= 1");
  if (!hidden_activations.empty() &&
      static_cast<int>(hidden_activations.size()) != num_layers() - 1) {
    throw ConfigError("expected one activation per hidden layer");
  }
}

void ModelArch::validate_interface_layer(int layer) const {
  if (layer < 1 || layer > num_layers() - 1) {
    throw ConfigError("interface layer " + std::to_string(layer) + " outside [1, " +
                      std::to_string(num_layers() - 1) + "]");
  }
}

// ---------------------------------------------------------------------------
// Weights

bool LayerWeights::operator==(const LayerWeights& other) const {
  auto eq = [](const auto& a, const auto& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (a[i].rows() != b[i].rows() || a[i].cols() != b[i].cols() || a[i] != b[i]) return false;
    }
    return true;
  };
  return eq(mats, other.mats) && eq(attn_src, other.attn_src) && eq(attn_dst, other.attn_dst);
}

Eigen::Index Weights::size() const {
  Eigen::Index n = 0;
  for (const auto& l : layers) {
    for (const auto& m : l.mats) n += m.size();
    for (const auto& v : l.attn_src) n += v.size();
    for (const auto& v : l.attn_dst) n += v.size();
  }
  return n;
}

namespace {

template <typename Fn>
void for_each_block(Weights& w, Fn&& fn) {
  for (auto& l : w.layers) {
    for (auto& m : l.mats) fn(m.data(), m.size());
    for (auto& v : l.attn_src) fn(v.data(), v.size());
    for (auto& v : l.attn_dst) fn(v.data(), v.size());
  }
}

template <typename Fn>
void for_each_block(const Weights& w, Fn&& fn) {
  for (const auto& l : w.layers) {
    for (const auto& m : l.mats) fn(m.data(), m.size());
    for (const auto& v : l.attn_src) fn(v.data(), v.size());
    for (const auto& v : l.attn_dst) fn(v.data(), v.size());
  }
}

}  // namespace

Vector Weights::flatten() const {
  Vector out(size());
  Eigen::Index pos = 0;
  for_each_block(*this, [&](const double* p, Eigen::Index n) {
    out.segment(pos, n) = Eigen::Map<const Vector>(p, n);
    pos += n;
  });
  return out;
}

void Weights::assign(const Vector& flat) {
  if (flat.size() != size()) throw ConfigError("flat parameter vector has the wrong size");
  Eigen::Index pos = 0;
  for_each_block(*this, [&](double* p, Eigen::Index n) {
    Eigen::Map<Vector>(p, n) = flat.segment(pos, n);
    pos += n;
  });
}

bool Weights::all_finite() const {
  bool ok = true;
  for_each_block(*this, [&](const double* p, Eigen::Index n) {
    ok = ok && Eigen::Map<const Vector>(p, n).allFinite();
  });
  return ok;
}

void Weights::add_scaled(const Weights& other, double alpha) {
  if (layers.size() != other.layers.size()) throw ConfigError("weight shapes differ");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    auto& a = layers[l];
    const auto& b = other.layers[l];
    for (std::size_t k = 0; k < a.mats.size(); ++k) a.mats[k] += alpha * b.mats[k];
    for (std::size_t k = 0; k < a.attn_src.size(); ++k) a.attn_src[k] += alpha * b.attn_src[k];
    for (std::size_t k = 0; k < a.attn_dst.size(); ++k) a.attn_dst[k] += alpha * b.attn_dst[k];
  }
}

bool Weights::operator==(const Weights& other) const { return layers == other.layers; }

// ---------------------------------------------------------------------------
// Snapshots

SnapshotRing::SnapshotRing(std::size_t capacity) : capacity_(std::max<std::size_t>(capacity, 1)) {}

void SnapshotRing::push(int epoch, const Weights& weights) {
  if (!entries_.empty() && epoch <= entries_.back().epoch) {
    throw ConfigError("snapshot epochs must increase");
  }
  if (entries_.size() == capacity_) entries_.pop_front();
  entries_.push_back({epoch, weights});
}

const Snapshot* SnapshotRing::find(int epoch) const {
  for (const auto& s : entries_) {
    if (s.epoch == epoch) return &s;
  }
  return nullptr;
}

void SnapshotRing::truncate_after(int epoch) {
  while (!entries_.empty() && entries_.back().epoch > epoch) entries_.pop_back();
}

ModelState init_model(const ModelArch& arch, std::uint64_t seed, std::size_t snapshot_capacity) {
  arch.validate();
  std::mt19937_64 rng(seed);
  auto glorot = [&](Eigen::Index rows, Eigen::Index cols) {
    const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
    std::uniform_real_distribution<double> dist(-limit, limit);
    Matrix m(rows, cols);
    for (Eigen::Index c = 0; c < cols; ++c) {
      for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = dist(rng);
    }
    return m;
  };

  ModelState state{{}, 0, SnapshotRing(snapshot_capacity)};
  for (int l = 1; l <= arch.num_layers(); ++l) {
    const auto din = arch.layer_dims[static_cast<std::size_t>(l - 1)];
    const auto dout = arch.layer_dims[static_cast<std::size_t>(l)];
    LayerWeights lw;
    switch (arch.kind) {
      case ArchKind::kGcn:
        lw.mats.push_back(glorot(din, dout));
        break;
      case ArchKind::kSage:
        lw.mats.push_back(glorot(din, dout));
        lw.mats.push_back(glorot(din, dout));
        break;
      case ArchKind::kGat:
        for (int k = 0; k < arch.num_heads; ++k) {
          lw.mats.push_back(glorot(din, dout));
          lw.attn_src.push_back(glorot(dout, 1).col(0));
          lw.attn_dst.push_back(glorot(dout, 1).col(0));
        }
        break;
    }
    state.weights.layers.push_back(std::move(lw));
  }
  state.ring.push(0, state.weights);
  return state;
}

// ---------------------------------------------------------------------------
// Propagation

Propagation::Propagation(GraphData graph, const ModelArch& arch)
    : graph_(std::move(graph)), arch_(arch) {
  arch_.validate();
  if (graph_.feature_dim() != arch_.layer_dims.front()) {
    throw ConfigError("feature dimension " + std::to_string(graph_.feature_dim()) +
                      " does not match input layer " + std::to_string(arch_.layer_dims.front()));
  }
  if (graph_.num_classes() != arch_.layer_dims.back()) {
    throw ConfigError("class count " + std::to_string(graph_.num_classes()) +
                      " does not match output layer " + std::to_string(arch_.layer_dims.back()));
  }
  laplacian_ = build_laplacian(graph_, arch_.laplacian);

  const NodeId n = graph_.num_nodes();
  std::vector<Eigen::Triplet<double>> t;
  t.reserve(2 * graph_.num_edges());
  attn_offsets_.assign(static_cast<std::size_t>(n) + 1, 0);
  for (NodeId i = 0; i < n; ++i) {
    const auto nbrs = graph_.neighbors(i);
    for (NodeId j : nbrs) t.emplace_back(i, j, 1.0 / static_cast<double>(nbrs.size()));
    bool self_done = !arch_.gat_self_attention;
    for (NodeId j : nbrs) {
      if (!self_done && i < j) {
        attn_index_.push_back(i);
        self_done = true;
      }
      attn_index_.push_back(j);
    }
    if (!self_done) attn_index_.push_back(i);
    attn_offsets_[static_cast<std::size_t>(i) + 1] = static_cast<Eigen::Index>(attn_index_.size());
  }
  mean_aggregator_.resize(n, n);
  mean_aggregator_.setFromTriplets(t.begin(), t.end());
  mean_aggregator_.makeCompressed();

  train_count_ = static_cast<double>(
      std::count(graph_.train_mask().begin(), graph_.train_mask().end(), true));
}

// ---------------------------------------------------------------------------
// Forward / backward

double AttentionCoefficients::at(int head, NodeId i, NodeId j) const {
  const auto begin = index.begin() + offsets[static_cast<std::size_t>(i)];
  const auto end = index.begin() + offsets[static_cast<std::size_t>(i) + 1];
  const auto it = std::lower_bound(begin, end, j);
  if (it == end || *it != j) return 0.0;
  return coefficients[static_cast<std::size_t>(head)][static_cast<std::size_t>(it - index.begin())];
}

namespace {

double leaky(double x, double slope) { return x > 0.0 ? x : slope * x; }

Matrix row_softmax(const Matrix& h) {
  Matrix out(h.rows(), h.cols());
  for (Eigen::Index i = 0; i < h.rows(); ++i) {
    const double m = h.row(i).maxCoeff();
    out.row(i) = (h.row(i).array() - m).exp();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

Matrix activate(const Matrix& h, Activation act) {
  if (act == Activation::kSigmoid) return (1.0 / (1.0 + (-h.array()).exp())).matrix();
  return h.cwiseMax(0.0);
}

// Attention of one head; returns coefficients aligned with the CSR index.
std::vector<double> head_attention(const Propagation& prop, const Matrix& p, const Vector& a_src,
                                   const Vector& a_dst) {
  const auto& off = prop.attention_offsets();
  const auto& idx = prop.attention_index();
  const double slope = prop.arch().gat_negative_slope;
  const Vector s = p * a_src;
  const Vector r = p * a_dst;
  std::vector<double> alpha(idx.size());
  for (NodeId i = 0; i + 1 < static_cast<NodeId>(off.size()); ++i) {
    const auto b = off[static_cast<std::size_t>(i)];
    const auto e = off[static_cast<std::size_t>(i) + 1];
    if (b == e) continue;
    double mx = -std::numeric_limits<double>::infinity();
    for (auto q = b; q < e; ++q) {
      const double v = leaky(s(i) + r(idx[static_cast<std::size_t>(q)]), slope);
      alpha[static_cast<std::size_t>(q)] = v;
      mx = std::max(mx, v);
    }
    double z = 0.0;
    for (auto q = b; q < e; ++q) {
      auto& a = alpha[static_cast<std::size_t>(q)];
      a = std::exp(a - mx);
      z += a;
    }
    for (auto q = b; q < e; ++q) alpha[static_cast<std::size_t>(q)] /= z;
  }
  return alpha;
}

}  // namespace

ForwardResult forward(const Propagation& prop, const Weights& weights) {
  const auto& arch = prop.arch();
  const int layers = arch.num_layers();
  if (static_cast<int>(weights.layers.size()) != layers) {
    throw ConfigError("weights have " + std::to_string(weights.layers.size()) + " layers, arch has " +
                      std::to_string(layers));
  }
  ForwardResult fwd;
  fwd.outputs.reserve(static_cast<std::size_t>(layers) + 1);
  fwd.outputs.push_back(prop.graph().features());
  fwd.messages.resize(static_cast<std::size_t>(layers));
  fwd.head_messages.resize(static_cast<std::size_t>(layers));
  fwd.attention.resize(static_cast<std::size_t>(layers));

  const auto& off = prop.attention_offsets();
  const auto& idx = prop.attention_index();

  for (int l = 1; l <= layers; ++l) {
    const auto li = static_cast<std::size_t>(l - 1);
    const Matrix& z = fwd.outputs.back();
    const LayerWeights& lw = weights.layers[li];
    const auto dout = arch.layer_dims[static_cast<std::size_t>(l)];
    if (z.cols() != lw.mats.front().rows() || lw.mats.front().cols() != dout) {
      throw ConfigError("layer " + std::to_string(l) + " weight shape does not match its input");
    }
    Matrix h;
    switch (arch.kind) {
      case ArchKind::kGcn: {
        fwd.messages[li] = z * lw.mats[0];
        h = prop.laplacian() * fwd.messages[li];
        break;
      }
      case ArchKind::kSage: {
        fwd.messages[li] = z * lw.mats[1];
        h = z * lw.mats[0] + prop.mean_aggregator() * fwd.messages[li];
        break;
      }
      case ArchKind::kGat: {
        const int heads = static_cast<int>(lw.mats.size());
        h = Matrix::Zero(z.rows(), dout);
        AttentionCoefficients att;
        att.offsets = off;
        att.index = idx;
        for (int k = 0; k < heads; ++k) {
          const auto ks = static_cast<std::size_t>(k);
          Matrix p = z * lw.mats[ks];
          auto alpha = head_attention(prop, p, lw.attn_src[ks], lw.attn_dst[ks]);
          for (NodeId i = 0; i < z.rows(); ++i) {
            for (auto q = off[static_cast<std::size_t>(i)]; q < off[static_cast<std::size_t>(i) + 1]; ++q) {
              h.row(i) += (alpha[static_cast<std::size_t>(q)] / heads) * p.row(idx[static_cast<std::size_t>(q)]);
            }
          }
          fwd.head_messages[li].push_back(std::move(p));
          att.coefficients.push_back(std::move(alpha));
        }
        fwd.attention[li] = std::move(att);
        break;
      }
    }
    fwd.outputs.push_back(l == layers ? row_softmax(h) : activate(h, arch.activation(l)));
    fwd.pre_activations.push_back(std::move(h));
  }
  return fwd;
}

ForwardResult forward(const GraphData& g, const ModelState& state, const ModelArch& arch) {
  return forward(Propagation(g, arch), state.weights);
}

double masked_cross_entropy(const Propagation& prop, const ForwardResult& fwd) {
  const auto& g = prop.graph();
  const auto& probs = fwd.probabilities();
  double loss = 0.0;
  for (NodeId i = 0; i < g.num_nodes(); ++i) {
    if (!g.train_mask()[static_cast<std::size_t>(i)]) continue;
    loss -= std::log(std::max(probs(i, g.label_of(i)), 1e-300));
  }
  return prop.train_count() > 0 ? loss / prop.train_count() : 0.0;
}

Weights gradient(const Propagation& prop, const Weights& weights, const ForwardResult& fwd) {
  const auto& arch = prop.arch();
  const auto& g = prop.graph();
  const int layers = arch.num_layers();
  const double slope = arch.gat_negative_slope;
  const auto& off = prop.attention_offsets();
  const auto& idx = prop.attention_index();

  Weights grad;
  grad.layers.resize(static_cast<std::size_t>(layers));

  Matrix dh = Matrix::Zero(g.num_nodes(), g.num_classes());
  if (prop.train_count() > 0) {
    for (NodeId i = 0; i < g.num_nodes(); ++i) {
      if (!g.train_mask()[static_cast<std::size_t>(i)]) continue;
      dh.row(i) = (fwd.probabilities().row(i) - g.labels().row(i)) / prop.train_count();
    }
  }

  for (int l = layers; l >= 1; --l) {
    const auto li = static_cast<std::size_t>(l - 1);
    const Matrix& z = fwd.outputs[li];
    const LayerWeights& lw = weights.layers[li];
    LayerWeights& gw = grad.layers[li];
    Matrix dz;
    switch (arch.kind) {
      case ArchKind::kGcn: {
        Matrix back = prop.laplacian().transpose() * dh;
        gw.mats.push_back(z.transpose() * back);
        if (l > 1) dz = back * lw.mats[0].transpose();
        break;
      }
      case ArchKind::kSage: {
        Matrix agg_z = prop.mean_aggregator() * z;
        gw.mats.push_back(z.transpose() * dh);
        gw.mats.push_back(agg_z.transpose() * dh);
        if (l > 1) {
          dz = dh * lw.mats[0].transpose() +
               prop.mean_aggregator().transpose() * (dh * lw.mats[1].transpose());
        }
        break;
      }
      case ArchKind::kGat: {
        const int heads = static_cast<int>(lw.mats.size());
        const auto& att = fwd.attention[li];
        if (l > 1) dz = Matrix::Zero(z.rows(), z.cols());
        for (int k = 0; k < heads; ++k) {
          const auto ks = static_cast<std::size_t>(k);
          const Matrix& p = fwd.head_messages[li][ks];
          const auto& alpha = att.coefficients[ks];
          const Matrix dhk = dh / heads;
          Matrix dp = Matrix::Zero(p.rows(), p.cols());
          Vector ds = Vector::Zero(p.rows());
          Vector dr = Vector::Zero(p.rows());
          const Vector s = p * lw.attn_src[ks];
          const Vector r = p * lw.attn_dst[ks];
          std::vector<double> dalpha;
          for (NodeId i = 0; i < p.rows(); ++i) {
            const auto b = off[static_cast<std::size_t>(i)];
            const auto e = off[static_cast<std::size_t>(i) + 1];
            dalpha.assign(static_cast<std::size_t>(e - b), 0.0);
            double weighted = 0.0;
            for (auto q = b; q < e; ++q) {
              const NodeId j = idx[static_cast<std::size_t>(q)];
              const double a = alpha[static_cast<std::size_t>(q)];
              dp.row(j) += a * dhk.row(i);
              const double da = dhk.row(i).dot(p.row(j));
              dalpha[static_cast<std::size_t>(q - b)] = da;
              weighted += a * da;
            }
            for (auto q = b; q < e; ++q) {
              const NodeId j = idx[static_cast<std::size_t>(q)];
              const double a = alpha[static_cast<std::size_t>(q)];
              const double de = a * (dalpha[static_cast<std::size_t>(q - b)] - weighted);
              const double du = s(i) + r(j) > 0.0 ? de : slope * de;
              ds(i) += du;
              dr(j) += du;
            }
          }
          gw.attn_src.push_back(p.transpose() * ds);
          gw.attn_dst.push_back(p.transpose() * dr);
          dp += ds * lw.attn_src[ks].transpose() + dr * lw.attn_dst[ks].transpose();
          gw.mats.push_back(z.transpose() * dp);
          if (l > 1) dz += dp * lw.mats[ks].transpose();
        }
        break;
      }
    }
    if (l > 1) {
      const Matrix& zl = z;  // activated output of layer l - 1
      if (arch.activation(l - 1) == Activation::kSigmoid) {
        dh = dz.cwiseProduct(zl.cwiseProduct((1.0 - zl.array()).matrix()));
      } else {
        const Matrix& hprev = fwd.pre_activations[static_cast<std::size_t>(l - 2)];
        dh = dz.cwiseProduct((hprev.array() > 0.0).cast<double>().matrix());
      }
    }
  }
  return grad;
}

AttentionCoefficients gat_attention(const Propagation& prop, const Weights& weights, int layer) {
  if (prop.arch().kind != ArchKind::kGat) throw ConfigError("gat_attention requires a GAT model");
  if (layer < 1 || layer > prop.arch().num_layers()) throw ConfigError("layer out of range");
  // Run the stack up to `layer` so that the layer input is current.
  ForwardResult fwd = forward(prop, weights);
  return fwd.attention[static_cast<std::size_t>(layer - 1)];
}

AttentionCoefficients gat_attention(const GraphData& g, const ModelState& state,
                                    const ModelArch& arch, int layer) {
  return gat_attention(Propagation(g, arch), state.weights, layer);
}

Matrix gcn_weight_delta(const SparseMatrix& laplacian, const Matrix& z_prev, const Matrix& probs,
                        const Matrix& labels, double eta) {
  if (probs.rows() != labels.rows() || probs.cols() != labels.cols()) {
    throw ConfigError("output and label shapes differ");
  }
  const Matrix lz = laplacian * z_prev;
  return eta * lz.transpose() * (probs - labels);
}

EpochResult train_epoch(const Propagation& prop, ModelState& state, const TrainConfig& cfg) {
  if (prop.train_count() <= 0) throw ConfigError("training mask is empty");
  EpochResult res;
  res.forward = forward(prop, state.weights);
  res.loss = masked_cross_entropy(prop, res.forward);
  if (!std::isfinite(res.loss)) {
    throw RuntimeFailure("non-finite loss at epoch " + std::to_string(state.epoch));
  }
  Weights grad = gradient(prop, state.weights, res.forward);
  if (!grad.all_finite()) {
    throw RuntimeFailure("non-finite gradient at epoch " + std::to_string(state.epoch) +
                         " (learning rate " + std::to_string(cfg.learning_rate) + ")");
  }
  state.weights.add_scaled(grad, -cfg.learning_rate);
  state.epoch += 1;
  state.ring.push(state.epoch, state.weights);
  return res;
}

RollbackResult rollback(ModelState& state, int delta) {
  if (state.ring.empty()) throw ConfigError("rollback requested with an empty snapshot ring");
  if (delta < 0) throw ConfigError("rollback depth must be non-negative");
  RollbackResult res{delta, 0};
  if (delta == 0) return res;
  const int target = state.epoch - delta;
  // Ring epochs are contiguous, so a missing target is older than anything
  // stored and the oldest snapshot is the closest available.
  const Snapshot* snap = state.ring.find(target);
  if (snap == nullptr) snap = &state.ring.oldest();
  const int restored = snap->epoch;
  state.weights = snap->weights;
  res.rewound = state.epoch - restored;
  state.epoch = restored;
  state.ring.truncate_after(restored);
  return res;
}

double accuracy(const GraphData& g, const Matrix& probs, const Mask& mask) {
  std::size_t hit = 0;
  std::size_t total = 0;
  for (NodeId i = 0; i < g.num_nodes(); ++i) {
    if (!mask[static_cast<std::size_t>(i)]) continue;
    Eigen::Index arg = 0;
    probs.row(i).maxCoeff(&arg);
    hit += static_cast<std::size_t>(arg == g.label_of(i));
    ++total;
  }
  return total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

}  // namespace grimm
