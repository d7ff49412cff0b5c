// Copyright 2026 The Grimm Authors
// SPDX-License-Identifier: Apache-2.0

#include "grimm/trajectory.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

namespace grimm {

TrajectoryBuffer TrajectoryBuffer::tail(Eigen::Index n) const {
  if (n >= length()) return *this;
  TrajectoryBuffer out{entity, layer, {}, points.bottomRows(n)};
  out.epochs.assign(epochs.end() - n, epochs.end());
  return out;
}

DirectionVector edge_direction_gcn(const Matrix& z_prev, const Matrix& delta_w,
                                   const EdgeContribution& contribution, NodeId target,
                                   int from_epoch) {
  if (z_prev.cols() != delta_w.rows() || z_prev.rows() != contribution.matrix.cols()) {
    throw ConfigError("edge_direction_gcn: dimension mismatch");
  }
  if (!contribution.edge.touches(target)) throw ConfigError("target is not an endpoint of the edge");
  RowVector row = RowVector::Zero(z_prev.cols());
  for (SparseMatrix::InnerIterator it(contribution.matrix, target); it; ++it) {
    row += it.value() * z_prev.row(it.col());
  }
  return {from_epoch, from_epoch + 1, row * delta_w};
}

DirectionVector node_direction(std::span<const DirectionVector> parts, Eigen::Index dim) {
  DirectionVector out{0, 1, RowVector::Zero(dim)};
  if (!parts.empty()) {
    out.from_epoch = parts.front().from_epoch;
    out.to_epoch = parts.front().to_epoch;
  }
  for (const auto& p : parts) {
    if (p.vector.size() != dim) throw ConfigError("node_direction: dimension mismatch");
    out.vector += p.vector;
  }
  return out;
}

DirectionVector edge_direction_gat(std::span<const double> coefficients,
                                   std::span<const Matrix> head_weights, const RowVector& z_source,
                                   int from_epoch) {
  if (coefficients.size() != head_weights.size() || head_weights.empty()) {
    throw ConfigError("edge_direction_gat: need one coefficient per head");
  }
  const double heads = static_cast<double>(head_weights.size());
  RowVector out = RowVector::Zero(head_weights.front().cols());
  for (std::size_t k = 0; k < head_weights.size(); ++k) {
    if (head_weights[k].rows() != z_source.size()) throw ConfigError("edge_direction_gat: dimension mismatch");
    out += (coefficients[k] / heads) * (z_source * head_weights[k]);
  }
  return {from_epoch, from_epoch + 1, out};
}

DirectionVector edge_direction_sage(const GraphData& g, const Weights& weights, const Matrix& z_prev,
                                    int layer, NodeId target, NodeId source, int from_epoch) {
  if (!g.has_edge(target, source)) {
    throw ConfigError("node " + std::to_string(source) + " is not a neighbor of " + std::to_string(target));
  }
  const auto& lw = weights.layers.at(static_cast<std::size_t>(layer - 1));
  if (lw.mats.size() != 2) throw ConfigError("edge_direction_sage: not a SAGE layer");
  const double share = 1.0 / static_cast<double>(g.degree(target));
  return {from_epoch, from_epoch + 1, share * (z_prev.row(source) * lw.mats[1])};
}

// ---------------------------------------------------------------------------
// Recorder

TrajectoryRecorder::TrajectoryRecorder(const Propagation& prop, int layer, std::size_t history)
    : layer_(layer), history_(history) {
  prop.arch().validate_interface_layer(layer);
  bind(prop);
}

void TrajectoryRecorder::bind(const Propagation& prop) {
  const auto& g = prop.graph();
  kind_ = prop.arch().kind;
  dim_ = prop.arch().layer_dims[static_cast<std::size_t>(layer_)];
  num_nodes_ = g.num_nodes();
  slots_.clear();
  slot_coeff_.clear();
  slot_attention_.clear();
  slot_index_.assign(static_cast<std::size_t>(num_nodes_), {});
  slots_.reserve(2 * g.num_edges());

  const auto& off = prop.attention_offsets();
  const auto& idx = prop.attention_index();
  for (const auto& e : g.edges()) {
    for (auto [t, s] : {std::pair{e.u, e.v}, std::pair{e.v, e.u}}) {
      const std::size_t slot = slots_.size();
      slots_.push_back(EntityId::edge(t, s));
      slot_index_[static_cast<std::size_t>(t)].emplace_back(s, slot);
      switch (kind_) {
        case ArchKind::kGcn:
          slot_coeff_.push_back(prop.laplacian().coeff(t, s));
          break;
        case ArchKind::kSage:
          slot_coeff_.push_back(1.0 / static_cast<double>(g.degree(t)));
          break;
        case ArchKind::kGat: {
          const auto b = idx.begin() + off[static_cast<std::size_t>(t)];
          const auto en = idx.begin() + off[static_cast<std::size_t>(t) + 1];
          slot_attention_.push_back(std::lower_bound(b, en, s) - idx.begin());
          slot_coeff_.push_back(0.0);
          break;
        }
      }
    }
  }
  for (auto& v : slot_index_) std::sort(v.begin(), v.end());
  reset();
}

void TrajectoryRecorder::rebind(const Propagation& prop) { bind(prop); }

void TrajectoryRecorder::reset() {
  epochs_.clear();
  node_points_.clear();
  edge_points_.clear();
  message_points_.clear();
  origin_messages_.resize(0, 0);
  have_last_ = false;
  last_messages_.resize(0, 0);
  position_ = Matrix::Zero(static_cast<Eigen::Index>(slots_.size()), dim_);
}

void TrajectoryRecorder::current_messages(const ForwardResult& fwd, Matrix& out) const {
  const auto li = static_cast<std::size_t>(layer_ - 1);
  switch (kind_) {
    case ArchKind::kGcn:
      out = fwd.messages[li];
      break;
    case ArchKind::kSage: {
      const Matrix& m = fwd.messages[li];
      out.resize(static_cast<Eigen::Index>(slots_.size()), dim_);
      for (std::size_t s = 0; s < slots_.size(); ++s) {
        out.row(static_cast<Eigen::Index>(s)) = slot_coeff_[s] * m.row(slots_[s].source);
      }
      break;
    }
    case ArchKind::kGat: {
      const auto& att = fwd.attention[li];
      const auto& heads = fwd.head_messages[li];
      const double k_inv = 1.0 / static_cast<double>(heads.size());
      out.setZero(static_cast<Eigen::Index>(slots_.size()), dim_);
      for (std::size_t k = 0; k < heads.size(); ++k) {
        const auto& coeff = att.coefficients[k];
        for (std::size_t s = 0; s < slots_.size(); ++s) {
          const double a = coeff[static_cast<std::size_t>(slot_attention_[s])] * k_inv;
          out.row(static_cast<Eigen::Index>(s)) += a * heads[k].row(slots_[s].source);
        }
      }
      break;
    }
  }
}

void TrajectoryRecorder::record_epoch(int epoch, const ForwardResult& fwd) {
  if (!epochs_.empty() && epoch != epochs_.back() + 1) {
    throw ConfigError("trajectory epochs must be contiguous: got " + std::to_string(epoch) +
                      " after " + std::to_string(epochs_.back()));
  }
  const auto li = static_cast<std::size_t>(layer_ - 1);
  if (fwd.pre_activations.size() <= li || fwd.pre_activations[li].rows() != num_nodes_ ||
      fwd.pre_activations[li].cols() != dim_) {
    throw ConfigError("forward result does not match the recorder's graph");
  }

  // A full window recycles its oldest buffers; these matrices are large
  // enough that fresh allocations per epoch show up in the overhead.
  const bool full = history_ > 0 && epochs_.size() == history_;
  auto recycle = [&](std::deque<Matrix>& q) {
    Matrix buf;
    if (full && !q.empty()) {
      buf = std::move(q.front());
      q.pop_front();
    }
    return buf;
  };
  if (full) epochs_.pop_front();
  Matrix node_buf = recycle(node_points_);
  node_buf = fwd.pre_activations[li];
  node_points_.push_back(std::move(node_buf));
  if (kind_ == ArchKind::kGcn) {
    const Matrix& msg = fwd.messages[li];
    if (!have_last_) origin_messages_ = msg;
    Matrix buf = recycle(message_points_);
    buf = msg;
    message_points_.push_back(std::move(buf));
  } else {
    if (have_last_) position_ += last_messages_;
    current_messages(fwd, last_messages_);
    Matrix buf = recycle(edge_points_);
    buf = position_;
    edge_points_.push_back(std::move(buf));
  }
  have_last_ = true;
  epochs_.push_back(epoch);
}

void TrajectoryRecorder::edge_point(std::size_t k, std::size_t slot, Eigen::Ref<RowVector, 0, Eigen::InnerStride<>> out) const {
  if (kind_ != ArchKind::kGcn) {
    out = edge_points_[k].row(static_cast<Eigen::Index>(slot));
    return;
  }
  const auto& id = slots_[slot];
  const Matrix& m = message_points_[k];
  out = slot_coeff_[slot] * ((m.row(id.source) - origin_messages_.row(id.source)) -
                             (m.row(id.target) - origin_messages_.row(id.target)));
}

Matrix TrajectoryRecorder::edge_points(std::size_t k) const {
  if (k >= epochs_.size()) throw ConfigError("edge point index out of range");
  if (kind_ != ArchKind::kGcn) return edge_points_[k];
  Matrix out(static_cast<Eigen::Index>(slots_.size()), dim_);
  for (std::size_t s = 0; s < slots_.size(); ++s) edge_point(k, s, out.row(static_cast<Eigen::Index>(s)));
  return out;
}

Eigen::Index TrajectoryRecorder::edge_slot(NodeId target, NodeId source) const {
  if (target < 0 || target >= num_nodes_) return -1;
  const auto& v = slot_index_[static_cast<std::size_t>(target)];
  auto it = std::lower_bound(v.begin(), v.end(), std::pair<NodeId, std::size_t>{source, 0});
  if (it == v.end() || it->first != source) return -1;
  return static_cast<Eigen::Index>(it->second);
}

TrajectoryBuffer TrajectoryRecorder::node_trajectory(NodeId i) const {
  if (i < 0 || i >= num_nodes_) throw ConfigError("node " + std::to_string(i) + " out of range");
  TrajectoryBuffer b{EntityId::node(i), layer_, {epochs_.begin(), epochs_.end()},
                     Matrix(static_cast<Eigen::Index>(epochs_.size()), dim_)};
  for (std::size_t k = 0; k < node_points_.size(); ++k) b.points.row(static_cast<Eigen::Index>(k)) = node_points_[k].row(i);
  return b;
}

TrajectoryBuffer TrajectoryRecorder::slot_trajectory(std::size_t slot) const {
  TrajectoryBuffer b{slots_.at(slot), layer_, {epochs_.begin(), epochs_.end()},
                     Matrix(static_cast<Eigen::Index>(epochs_.size()), dim_)};
  for (std::size_t k = 0; k < epochs_.size(); ++k) edge_point(k, slot, b.points.row(static_cast<Eigen::Index>(k)));
  return b;
}

TrajectoryBuffer TrajectoryRecorder::edge_trajectory(NodeId target, NodeId source) const {
  const auto slot = edge_slot(target, source);
  if (slot < 0) {
    throw ConfigError("no edge trajectory for (" + std::to_string(target) + " <- " +
                      std::to_string(source) + ")");
  }
  return slot_trajectory(static_cast<std::size_t>(slot));
}

// ---------------------------------------------------------------------------
// Normalization

NormalizedTrajectory align_trajectory(const Matrix& points) {
  if (points.rows() < 2) throw ConfigError("a trajectory needs at least two points to normalize");
  if (!points.allFinite()) throw ConfigError("trajectory contains non-finite values");
  NormalizedTrajectory out;
  out.translation = points.row(0);
  Matrix p = points.rowwise() - out.translation;
  const Eigen::Index last = p.rows() - 1;
  const RowVector end = p.row(last);
  const double n = end.norm();
  const double reach = p.rowwise().norm().maxCoeff();
  out.displacement = n;
  if (n == 0.0 || n <= 1e-12 * reach) {
    out.degenerate = true;
    out.displacement = 0.0;
    out.points = Matrix::Zero(p.rows(), p.cols());
    return out;
  }
  RowVector v = end / n;
  v(0) -= 1.0;
  const double vv = v.squaredNorm();
  if (vv > 1e-30) p -= (2.0 / vv) * (p * v.transpose()) * v;
  p.row(last).setZero();
  p(last, 0) = n;
  out.points = p.cwiseAbs();
  return out;
}

TrajectoryNormalizer TrajectoryNormalizer::fit(std::span<const NormalizedTrajectory> aligned) {
  double mx = 0.0;
  for (const auto& t : aligned) {
    if (t.points.size() > 0) mx = std::max(mx, t.points.maxCoeff());
  }
  return TrajectoryNormalizer(mx > 0.0 ? mx : 1.0);
}

NormalizedTrajectory TrajectoryNormalizer::apply(NormalizedTrajectory aligned) const {
  aligned.points = (aligned.points / scale_).cwiseMax(0.0).cwiseMin(1.0);
  aligned.scale = scale_;
  return aligned;
}

std::vector<NormalizedTrajectory> normalize(std::span<const Matrix> trajectories) {
  std::vector<NormalizedTrajectory> aligned;
  aligned.reserve(trajectories.size());
  for (const auto& t : trajectories) {
    if (!aligned.empty() && (t.rows() != aligned.front().length() || t.cols() != aligned.front().dim())) {
      throw ConfigError("trajectories in one set must share length and dimension");
    }
    aligned.push_back(align_trajectory(t));
  }
  const auto norm = TrajectoryNormalizer::fit(aligned);
  for (auto& a : aligned) a = norm.apply(std::move(a));
  return aligned;
}

double trajectory_mse(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ConfigError("trajectory shapes differ: " + std::to_string(a.rows()) + "x" +
                      std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                      std::to_string(b.cols()));
  }
  if (a.rows() == 0) throw ConfigError("empty trajectories");
  return (a - b).squaredNorm() / static_cast<double>(a.rows());
}

// ---------------------------------------------------------------------------
// Dump format

void write_trajectories(std::ostream& out, std::span<const TrajectoryBuffer> buffers) {
  const Eigen::Index dim = buffers.empty() ? 0 : buffers.front().dim();
  const Eigen::Index len = buffers.empty() ? 0 : buffers.front().length();
  out << "grimm-trajectories 1 dim=" << dim << " length=" << len << '\n';
  out.precision(std::numeric_limits<double>::max_digits10);
  for (const auto& b : buffers) {
    if (b.dim() != dim || b.length() != len) throw ConfigError("buffers in one dump must share shape");
    if (b.entity.kind == EntityKind::kNode) {
      out << "node " << b.entity.target;
    } else {
      out << "edge " << b.entity.source << '>' << b.entity.target;
    }
    out << " layer=" << b.layer << " epochs=";
    for (std::size_t k = 0; k < b.epochs.size(); ++k) out << (k ? "," : "") << b.epochs[k];
    for (Eigen::Index r = 0; r < b.points.rows(); ++r) {
      for (Eigen::Index c = 0; c < b.points.cols(); ++c) out << ' ' << b.points(r, c);
    }
    out << '\n';
  }
}

namespace {

long parse_long(const std::string& s, const std::string& source, std::size_t line) {
  std::size_t used = 0;
  long v = 0;
  try {
    v = std::stol(s, &used);
  } catch (const std::exception&) {
    throw ParseError(source, line, "expected an integer, found '" + s + "'");
  }
  if (used != s.size()) throw ParseError(source, line, "expected an integer, found '" + s + "'");
  return v;
}

std::string expect_key(const std::string& token, const std::string& key, const std::string& source,
                       std::size_t line) {
  if (token.rfind(key + "=", 0) != 0) throw ParseError(source, line, "expected '" + key + "=...'");
  return token.substr(key.size() + 1);
}

}  // namespace

std::vector<TrajectoryBuffer> read_trajectories(std::istream& in, const std::string& source) {
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(in, line)) throw ParseError(source, 1, "missing header");
  ++lineno;
  std::istringstream hs(line);
  std::string magic, version, dim_tok, len_tok;
  if (!(hs >> magic >> version >> dim_tok >> len_tok) || magic != "grimm-trajectories") {
    throw ParseError(source, lineno, "not a trajectory dump");
  }
  if (version != "1") throw ParseError(source, lineno, "unsupported version " + version);
  const long dim = parse_long(expect_key(dim_tok, "dim", source, lineno), source, lineno);
  const long len = parse_long(expect_key(len_tok, "length", source, lineno), source, lineno);
  if (dim < 0 || len < 0) throw ParseError(source, lineno, "negative shape");

  std::vector<TrajectoryBuffer> out;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string kind, id, layer_tok, epochs_tok;
    if (!(ls >> kind >> id >> layer_tok >> epochs_tok)) throw ParseError(source, lineno, "truncated record");
    TrajectoryBuffer b;
    if (kind == "node") {
      b.entity = EntityId::node(parse_long(id, source, lineno));
    } else if (kind == "edge") {
      const auto gt = id.find('>');
      if (gt == std::string::npos) throw ParseError(source, lineno, "edge id must be <source>><target>");
      const long s = parse_long(id.substr(0, gt), source, lineno);
      const long t = parse_long(id.substr(gt + 1), source, lineno);
      if (s == t) throw ParseError(source, lineno, "edge endpoints coincide");
      b.entity = EntityId::edge(t, s);
    } else {
      throw ParseError(source, lineno, "unknown record kind '" + kind + "'");
    }
    b.layer = static_cast<int>(parse_long(expect_key(layer_tok, "layer", source, lineno), source, lineno));
    std::istringstream es(expect_key(epochs_tok, "epochs", source, lineno));
    std::string e;
    while (std::getline(es, e, ',')) {
      const int ep = static_cast<int>(parse_long(e, source, lineno));
      if (!b.epochs.empty() && ep <= b.epochs.back()) throw ParseError(source, lineno, "epochs must increase");
      b.epochs.push_back(ep);
    }
    if (static_cast<long>(b.epochs.size()) != len) throw ParseError(source, lineno, "epoch count differs from header length");
    b.points.resize(len, dim);
    for (long r = 0; r < len; ++r) {
      for (long c = 0; c < dim; ++c) {
        std::string tok;
        if (!(ls >> tok)) throw ParseError(source, lineno, "expected " + std::to_string(len * dim) + " values");
        try {
          std::size_t used = 0;
          b.points(r, c) = std::stod(tok, &used);
          if (used != tok.size()) throw std::invalid_argument(tok);
        } catch (const std::exception&) {
          throw ParseError(source, lineno, "bad real '" + tok + "'");
        }
      }
    }
    std::string extra;
    if (ls >> extra) throw ParseError(source, lineno, "trailing data");
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace grimm
