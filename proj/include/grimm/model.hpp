// Copyright 2026 The Grimm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <deque>
#include <optional>
#include <string_view>
#include <vector>

#include "grimm/graph.hpp"
#include "grimm/types.hpp"

namespace grimm {

enum class ArchKind { kGcn, kGat, kSage };
enum class Activation { kSigmoid, kRelu };

std::string_view to_string(ArchKind kind);
ArchKind parse_arch_kind(std::string_view name);
std::string_view to_string(Activation act);
Activation parse_activation(std::string_view name);

/// Shape and flavor of a message-passing model. Layers are numbered 1..L;
/// layer L is the softmax classifier.
struct ModelArch {
  ArchKind kind = ArchKind::kGcn;
  std::vector<Eigen::Index> layer_dims;  // d0, d1, ..., dL
  int num_heads = 1;                     // GAT only; head outputs are averaged
  std::vector<Activation> hidden_activations;  // one per hidden layer; empty = all sigmoid
  LaplacianKind laplacian = LaplacianKind::kSymNormalizedWithSelfLoops;
  bool gat_self_attention = true;
  double gat_negative_slope = 0.2;

  int num_layers() const { return static_cast<int>(layer_dims.size()) - 1; }
  int penultimate_layer() const { return num_layers() - 1; }
  Activation activation(int layer) const;

  /// Throws ConfigError unless L >= 2, all dims positive and heads >= 1.
  void validate() const;
  /// Throws ConfigError unless 1 <= layer <= L - 1.
  void validate_interface_layer(int layer) const;
};

/// Trainable parameters of one layer.
///   GCN:  mats = {W}
///   GAT:  mats = {W_1..W_K}, attn_src/attn_dst one vector per head
///   SAGE: mats = {W_self, W_neigh}
struct LayerWeights {
  std::vector<Matrix> mats;
  std::vector<Vector> attn_src;
  std::vector<Vector> attn_dst;

  bool operator==(const LayerWeights& other) const;
};

struct Weights {
  std::vector<LayerWeights> layers;

  Eigen::Index size() const;
  Vector flatten() const;
  void assign(const Vector& flat);
  bool all_finite() const;
  /// this += alpha * other (shapes must match).
  void add_scaled(const Weights& other, double alpha);
  bool operator==(const Weights& other) const;
};

struct Snapshot {
  int epoch = 0;
  Weights weights;
};

/// Bounded, epoch-ordered history of weight snapshots. Pushing beyond the
/// capacity evicts the oldest entry.
class SnapshotRing {
 public:
  explicit SnapshotRing(std::size_t capacity = 1);

  void push(int epoch, const Weights& weights);
  std::size_t size() const { return entries_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return entries_.empty(); }
  const Snapshot& oldest() const { return entries_.front(); }
  const Snapshot& newest() const { return entries_.back(); }
  const Snapshot* find(int epoch) const;
  /// Drops every snapshot newer than `epoch`.
  void truncate_after(int epoch);
  const std::deque<Snapshot>& entries() const { return entries_; }

 private:
  std::size_t capacity_;
  std::deque<Snapshot> entries_;
};

struct ModelState {
  Weights weights;
  int epoch = 0;  // number of gradient steps applied to `weights`
  SnapshotRing ring;
};

struct TrainConfig {
  double learning_rate = 1.0;
  int max_epochs = 200;
  std::uint64_t seed = 0;
  std::size_t snapshot_capacity = 64;
};

/// Glorot-uniform initialization, deterministic for a seed. The initial
/// weights are recorded as the epoch-0 snapshot.
ModelState init_model(const ModelArch& arch, std::uint64_t seed, std::size_t snapshot_capacity);

/// Attention coefficients of one GAT layer in CSR form over each node's
/// attention neighborhood (neighbors, plus the node itself when self
/// attention is on). coefficients[k][p] belongs to pair (i, index[p]) with
/// offsets[i] <= p < offsets[i + 1].
struct AttentionCoefficients {
  std::vector<Eigen::Index> offsets;
  std::vector<NodeId> index;
  std::vector<std::vector<double>> coefficients;

  /// Coefficient of head k on (i <- j); 0 if j is outside i's neighborhood.
  double at(int head, NodeId i, NodeId j) const;
  int num_heads() const { return static_cast<int>(coefficients.size()); }
};

/// Graph-dependent operators for one (graph, architecture) pair.
class Propagation {
 public:
  Propagation(GraphData graph, const ModelArch& arch);

  const GraphData& graph() const { return graph_; }
  const ModelArch& arch() const { return arch_; }
  const SparseMatrix& laplacian() const { return laplacian_; }
  /// D^-1 A, zero rows for isolated nodes.
  const SparseMatrix& mean_aggregator() const { return mean_aggregator_; }
  const std::vector<Eigen::Index>& attention_offsets() const { return attn_offsets_; }
  const std::vector<NodeId>& attention_index() const { return attn_index_; }
  double train_count() const { return train_count_; }

 private:
  GraphData graph_;
  ModelArch arch_;
  SparseMatrix laplacian_;
  SparseMatrix mean_aggregator_;
  std::vector<Eigen::Index> attn_offsets_;
  std::vector<NodeId> attn_index_;
  double train_count_ = 0.0;
};

/// Per-layer intermediate values of one forward pass.
///   pre_activations[l - 1] = H_l, outputs[l] = Z_l (outputs[0] = features).
///   messages[l - 1]: GCN Z_{l-1} W_l, SAGE Z_{l-1} W_neigh, GAT unused.
///   head_messages[l - 1][k]: GAT Z_{l-1} W_k.
struct ForwardResult {
  std::vector<Matrix> pre_activations;
  std::vector<Matrix> outputs;
  std::vector<Matrix> messages;
  std::vector<std::vector<Matrix>> head_messages;
  std::vector<AttentionCoefficients> attention;

  const Matrix& probabilities() const { return outputs.back(); }
};

ForwardResult forward(const Propagation& prop, const Weights& weights);
ForwardResult forward(const GraphData& g, const ModelState& state, const ModelArch& arch);

/// Mean cross-entropy over the training mask.
double masked_cross_entropy(const Propagation& prop, const ForwardResult& fwd);

/// Gradient of masked_cross_entropy with respect to every parameter.
Weights gradient(const Propagation& prop, const Weights& weights, const ForwardResult& fwd);

/// Attention of one GAT layer (1-based) under the given weights.
AttentionCoefficients gat_attention(const Propagation& prop, const Weights& weights, int layer);
AttentionCoefficients gat_attention(const GraphData& g, const ModelState& state,
                                    const ModelArch& arch, int layer);

/// Weight change of a single softmax GCN layer trained on summed
/// cross-entropy: eta * (L Z)^T (O - Y).
Matrix gcn_weight_delta(const SparseMatrix& laplacian, const Matrix& z_prev, const Matrix& probs,
                        const Matrix& labels, double eta);

struct EpochResult {
  ForwardResult forward;  // computed with the weights before the step
  double loss = 0.0;
};

/// One full-batch gradient-descent step. Pushes the post-step weights onto
/// the snapshot ring. Throws RuntimeFailure on non-finite loss or gradients.
EpochResult train_epoch(const Propagation& prop, ModelState& state, const TrainConfig& cfg);

struct RollbackResult {
  int requested = 0;
  int rewound = 0;
};

/// Restores the snapshot `delta` epochs back (or the oldest one available),
/// rewinds the epoch counter and drops newer snapshots. Throws ConfigError
/// on an empty ring.
RollbackResult rollback(ModelState& state, int delta);

/// Fraction of masked nodes whose argmax prediction matches the label.
double accuracy(const GraphData& g, const Matrix& probs, const Mask& mask);

}  // namespace grimm
