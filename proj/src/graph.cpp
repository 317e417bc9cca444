#include "mce/graph.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <utility>

#include "mce/errors.hpp"

namespace mce {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<RowMat>;
using CMapRM = Eigen::Map<const RowMat>;

CMapRM as_matrix(const Tensor& t, int rows, int cols) {
  return CMapRM(t.data.data(), rows, cols);
}

MapRM as_matrix(Tensor& t, int rows, int cols) { return MapRM(t.data.data(), rows, cols); }

}  // namespace

Graph::NodeId Graph::input(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, nullptr, nullptr});
  return static_cast<NodeId>(nodes_.size() - 1);
}

Graph::NodeId Graph::param(ParamStore& store, const std::string& name) {
  auto& entry = store.at(name);
  nodes_.push_back(Node{entry.value, {}, {}, nullptr, &entry});
  return static_cast<NodeId>(nodes_.size() - 1);
}

Graph::NodeId Graph::custom(Tensor value, std::vector<NodeId> parents,
                            std::function<void(Graph&, NodeId)> backward_fn) {
  for (NodeId p : parents) {
    if (p < 0 || p >= static_cast<NodeId>(nodes_.size())) {
      throw ConfigError("graph node references an unknown parent");
    }
  }
  nodes_.push_back(Node{std::move(value), {}, std::move(parents), std::move(backward_fn), nullptr});
  return static_cast<NodeId>(nodes_.size() - 1);
}

void Graph::backward(NodeId root) {
  if (backward_done_) {
    throw StateError("backward already ran on this graph; record a new forward pass first");
  }
  if (root < 0 || root >= static_cast<NodeId>(nodes_.size())) {
    throw ConfigError("backward root is not a graph node");
  }
  if (nodes_[static_cast<size_t>(root)].value.numel() != 1) {
    throw ConfigError("backward root must be a scalar node");
  }
  for (auto& n : nodes_) n.grad = Tensor(n.value.shape);
  nodes_[static_cast<size_t>(root)].grad[0] = 1.0;
  for (size_t i = nodes_.size(); i-- > 0;) {
    auto& n = nodes_[i];
    if (n.backward_fn) n.backward_fn(*this, static_cast<NodeId>(i));
  }
  for (auto& n : nodes_) {
    if (n.param == nullptr) continue;
    double* dst = n.param->grad.data.data();
    const double* src = n.grad.data.data();
    const int64_t m = n.grad.numel();
    for (int64_t i = 0; i < m; ++i) dst[i] += src[i];
  }
  backward_done_ = true;
}

Graph::NodeId dense(Graph& g, Graph::NodeId x, Graph::NodeId w, Graph::NodeId b) {
  const Tensor& xv = g.value(x);
  const Tensor& wv = g.value(w);
  const Tensor& bv = g.value(b);
  if (xv.rank() != 2 || wv.rank() != 2 || bv.rank() != 1 || xv.dim(1) != wv.dim(0) ||
      wv.dim(1) != bv.dim(0)) {
    throw ConfigError("dense: shapes do not conform");
  }
  const int B = xv.dim(0), I = xv.dim(1), O = wv.dim(1);
  Tensor out({B, O});
  as_matrix(out, B, O).noalias() = as_matrix(xv, B, I) * as_matrix(wv, I, O);
  for (int r = 0; r < B; ++r) {
    for (int c = 0; c < O; ++c) out.at(r, c) += bv[c];
  }
  return g.custom(std::move(out), {x, w, b}, [x, w, b, B, I, O](Graph& gg, Graph::NodeId self) {
    const Tensor& dy = gg.grad(self);
    auto dym = as_matrix(dy, B, O);
    as_matrix(gg.grad(x), B, I).noalias() +=
        dym * as_matrix(gg.value(w), I, O).transpose();
    as_matrix(gg.grad(w), I, O).noalias() +=
        as_matrix(gg.value(x), B, I).transpose() * dym;
    Tensor& db = gg.grad(b);
    for (int r = 0; r < B; ++r) {
      for (int c = 0; c < O; ++c) db[c] += dy.at(r, c);
    }
  });
}

namespace {

// Col[p, (c*KH+u)*KW+v] = x[c, i+u, j+v] for p = i*Wo + j.
void im2col(const double* x, int Cin, int H, int W, int KH, int KW, RowMat& col) {
  const int Ho = H - KH + 1, Wo = W - KW + 1;
  for (int i = 0; i < Ho; ++i) {
    for (int j = 0; j < Wo; ++j) {
      double* row = col.data() + static_cast<int64_t>(i * Wo + j) * col.cols();
      for (int c = 0; c < Cin; ++c) {
        const double* plane = x + static_cast<int64_t>(c) * H * W;
        for (int u = 0; u < KH; ++u) {
          const double* src = plane + static_cast<int64_t>(i + u) * W + j;
          for (int v = 0; v < KW; ++v) *row++ = src[v];
        }
      }
    }
  }
}

void col2im_add(const RowMat& col, int Cin, int H, int W, int KH, int KW, double* dx) {
  const int Ho = H - KH + 1, Wo = W - KW + 1;
  for (int i = 0; i < Ho; ++i) {
    for (int j = 0; j < Wo; ++j) {
      const double* row = col.data() + static_cast<int64_t>(i * Wo + j) * col.cols();
      for (int c = 0; c < Cin; ++c) {
        double* plane = dx + static_cast<int64_t>(c) * H * W;
        for (int u = 0; u < KH; ++u) {
          double* dst = plane + static_cast<int64_t>(i + u) * W + j;
          for (int v = 0; v < KW; ++v) dst[v] += *row++;
        }
      }
    }
  }
}

}  // namespace

Graph::NodeId conv2d(Graph& g, Graph::NodeId x, Graph::NodeId k, Graph::NodeId b) {
  const Tensor& xv = g.value(x);
  const Tensor& kv = g.value(k);
  const Tensor& bv = g.value(b);
  if (xv.rank() != 4 || kv.rank() != 4 || bv.rank() != 1) {
    throw ConfigError("conv2d: expected x[B,C,H,W], k[F,C,KH,KW], b[F]");
  }
  const int B = xv.dim(0), Cin = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const int F = kv.dim(0), KH = kv.dim(2), KW = kv.dim(3);
  if (kv.dim(1) != Cin || bv.dim(0) != F) throw ConfigError("conv2d: channel counts do not conform");
  if (KH > H || KW > W) throw ConfigError("conv2d: kernel larger than input");
  const int Ho = H - KH + 1, Wo = W - KW + 1;
  const int P = Ho * Wo, K = Cin * KH * KW;

  Tensor out({B, F, Ho, Wo});
  {
    RowMat col(P, K);
    CMapRM kmat(kv.data.data(), F, K);
    for (int n = 0; n < B; ++n) {
      im2col(xv.data.data() + static_cast<int64_t>(n) * Cin * H * W, Cin, H, W, KH, KW, col);
      MapRM outslice(out.data.data() + static_cast<int64_t>(n) * F * P, F, P);
      outslice.noalias() = kmat * col.transpose();
      for (int f = 0; f < F; ++f) outslice.row(f).array() += bv[f];
    }
  }
  return g.custom(std::move(out), {x, k, b},
                  [x, k, b, B, Cin, H, W, F, KH, KW, P, K](Graph& gg, Graph::NodeId self) {
                    const Tensor& dy = gg.grad(self);
                    const Tensor& xv2 = gg.value(x);
                    CMapRM kmat(gg.value(k).data.data(), F, K);
                    MapRM dkmat(gg.grad(k).data.data(), F, K);
                    Tensor& db = gg.grad(b);
                    Tensor& dx = gg.grad(x);
                    RowMat col(P, K), dcol(P, K);
                    for (int n = 0; n < B; ++n) {
                      CMapRM dyslice(dy.data.data() + static_cast<int64_t>(n) * F * P, F, P);
                      im2col(xv2.data.data() + static_cast<int64_t>(n) * Cin * H * W, Cin, H, W,
                             KH, KW, col);
                      dkmat.noalias() += dyslice * col;
                      dcol.noalias() = dyslice.transpose() * kmat;
                      col2im_add(dcol, Cin, H, W, KH, KW,
                                 dx.data.data() + static_cast<int64_t>(n) * Cin * H * W);
                      for (int f = 0; f < F; ++f) db[f] += dyslice.row(f).sum();
                    }
                  });
}

Graph::NodeId relu(Graph& g, Graph::NodeId x) {
  const Tensor& xv = g.value(x);
  Tensor out(xv.shape);
  for (int64_t i = 0; i < xv.numel(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  return g.custom(std::move(out), {x}, [x](Graph& gg, Graph::NodeId self) {
    const Tensor& dy = gg.grad(self);
    const Tensor& xv2 = gg.value(x);
    Tensor& dx = gg.grad(x);
    for (int64_t i = 0; i < dy.numel(); ++i) {
      if (xv2[i] > 0.0) dx[i] += dy[i];
    }
  });
}

Graph::NodeId dropout(Graph& g, Graph::NodeId x, double rate, bool train_mode, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must be in [0, 1)");
  const Tensor& xv = g.value(x);
  if (!train_mode || rate == 0.0) {
    Tensor out = xv;
    return g.custom(std::move(out), {x}, [x](Graph& gg, Graph::NodeId self) {
      const Tensor& dy = gg.grad(self);
      Tensor& dx = gg.grad(x);
      for (int64_t i = 0; i < dy.numel(); ++i) dx[i] += dy[i];
    });
  }
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(static_cast<size_t>(xv.numel()));
  for (auto& m : mask) m = rng.uniform01() < rate ? 0.0 : keep_scale;
  Tensor out(xv.shape);
  for (int64_t i = 0; i < xv.numel(); ++i) out[i] = xv[i] * mask[static_cast<size_t>(i)];
  return g.custom(std::move(out), {x}, [x, mask = std::move(mask)](Graph& gg, Graph::NodeId self) {
    const Tensor& dy = gg.grad(self);
    Tensor& dx = gg.grad(x);
    for (int64_t i = 0; i < dy.numel(); ++i) dx[i] += dy[i] * mask[static_cast<size_t>(i)];
  });
}

Graph::NodeId flatten(Graph& g, Graph::NodeId x) {
  const Tensor& xv = g.value(x);
  if (xv.rank() < 1) throw ConfigError("flatten: rank-0 input");
  const int B = xv.dim(0);
  const int rest = B > 0 ? static_cast<int>(xv.numel() / B) : 0;
  Tensor out({B, rest}, xv.data);
  return g.custom(std::move(out), {x}, [x](Graph& gg, Graph::NodeId self) {
    const Tensor& dy = gg.grad(self);
    Tensor& dx = gg.grad(x);
    for (int64_t i = 0; i < dy.numel(); ++i) dx[i] += dy[i];
  });
}

Graph::NodeId add(Graph& g, Graph::NodeId a, Graph::NodeId b) {
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  if (!av.same_shape(bv)) throw ConfigError("add: shape mismatch");
  Tensor out(av.shape);
  for (int64_t i = 0; i < av.numel(); ++i) out[i] = av[i] + bv[i];
  return g.custom(std::move(out), {a, b}, [a, b](Graph& gg, Graph::NodeId self) {
    const Tensor& dy = gg.grad(self);
    Tensor& da = gg.grad(a);
    Tensor& db = gg.grad(b);
    for (int64_t i = 0; i < dy.numel(); ++i) {
      da[i] += dy[i];
      db[i] += dy[i];
    }
  });
}

Graph::NodeId add_rowvec(Graph& g, Graph::NodeId x, std::vector<double> row) {
  const Tensor& xv = g.value(x);
  if (xv.rank() != 2 || xv.dim(1) != static_cast<int>(row.size())) {
    throw ConfigError("add_rowvec: shape mismatch");
  }
  const int B = xv.dim(0), C = xv.dim(1);
  Tensor out({B, C});
  for (int r = 0; r < B; ++r) {
    for (int c = 0; c < C; ++c) out.at(r, c) = xv.at(r, c) + row[static_cast<size_t>(c)];
  }
  return g.custom(std::move(out), {x}, [x](Graph& gg, Graph::NodeId self) {
    const Tensor& dy = gg.grad(self);
    Tensor& dx = gg.grad(x);
    for (int64_t i = 0; i < dy.numel(); ++i) dx[i] += dy[i];
  });
}

Graph::NodeId scale(Graph& g, Graph::NodeId x, double c) {
  const Tensor& xv = g.value(x);
  Tensor out(xv.shape);
  for (int64_t i = 0; i < xv.numel(); ++i) out[i] = xv[i] * c;
  return g.custom(std::move(out), {x}, [x, c](Graph& gg, Graph::NodeId self) {
    const Tensor& dy = gg.grad(self);
    Tensor& dx = gg.grad(x);
    for (int64_t i = 0; i < dy.numel(); ++i) dx[i] += dy[i] * c;
  });
}

Graph::NodeId grad_scale(Graph& g, Graph::NodeId x, double s) {
  Tensor out = g.value(x);
  return g.custom(std::move(out), {x}, [x, s](Graph& gg, Graph::NodeId self) {
    const Tensor& dy = gg.grad(self);
    Tensor& dx = gg.grad(x);
    for (int64_t i = 0; i < dy.numel(); ++i) dx[i] += dy[i] * s;
  });
}

Graph::NodeId concat_cols(Graph& g, Graph::NodeId a, Graph::NodeId b) {
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(0) != bv.dim(0)) {
    throw ConfigError("concat_cols: row counts differ");
  }
  const int B = av.dim(0), Ca = av.dim(1), Cb = bv.dim(1);
  Tensor out({B, Ca + Cb});
  for (int r = 0; r < B; ++r) {
    for (int c = 0; c < Ca; ++c) out.at(r, c) = av.at(r, c);
    for (int c = 0; c < Cb; ++c) out.at(r, Ca + c) = bv.at(r, c);
  }
  return g.custom(std::move(out), {a, b}, [a, b, B, Ca, Cb](Graph& gg, Graph::NodeId self) {
    const Tensor& dy = gg.grad(self);
    Tensor& da = gg.grad(a);
    Tensor& db = gg.grad(b);
    for (int r = 0; r < B; ++r) {
      for (int c = 0; c < Ca; ++c) da.at(r, c) += dy.at(r, c);
      for (int c = 0; c < Cb; ++c) db.at(r, c) += dy.at(r, Ca + c);
    }
  });
}

Graph::NodeId log_softmax(Graph& g, Graph::NodeId x) {
  const Tensor& xv = g.value(x);
  if (xv.rank() != 2) throw ConfigError("log_softmax: expected [B,C]");
  const int B = xv.dim(0), C = xv.dim(1);
  Tensor out({B, C});
  for (int r = 0; r < B; ++r) {
    double m = xv.at(r, 0);
    for (int c = 1; c < C; ++c) m = std::max(m, xv.at(r, c));
    double sum = 0.0;
    for (int c = 0; c < C; ++c) sum += std::exp(xv.at(r, c) - m);
    // (x - m) - log(sum), not x - (m + log(sum)): keeps the result invariant
    // under shifts that leave the centered values exact.
    const double log_sum = std::log(sum);
    for (int c = 0; c < C; ++c) out.at(r, c) = (xv.at(r, c) - m) - log_sum;
  }
  return g.custom(std::move(out), {x}, [x, B, C](Graph& gg, Graph::NodeId self) {
    const Tensor& dy = gg.grad(self);
    const Tensor& y = gg.value(self);
    Tensor& dx = gg.grad(x);
    for (int r = 0; r < B; ++r) {
      double total = 0.0;
      for (int c = 0; c < C; ++c) total += dy.at(r, c);
      for (int c = 0; c < C; ++c) {
        dx.at(r, c) += dy.at(r, c) - std::exp(y.at(r, c)) * total;
      }
    }
  });
}

Graph::NodeId cross_entropy(Graph& g, Graph::NodeId log_probs, const std::vector<int>& labels,
                            const std::vector<double>* weights) {
  const Tensor& lp = g.value(log_probs);
  if (lp.rank() != 2) throw ConfigError("cross_entropy: expected [B,C] log-probabilities");
  const int B = lp.dim(0), C = lp.dim(1);
  if (static_cast<int>(labels.size()) != B) throw ConfigError("cross_entropy: label count mismatch");
  std::vector<double> u(static_cast<size_t>(B), B > 0 ? 1.0 / B : 0.0);
  if (weights != nullptr) {
    if (static_cast<int>(weights->size()) != B) {
      throw ConfigError("cross_entropy: weight count mismatch");
    }
    double total = 0.0;
    for (double w : *weights) {
      if (w < 0.0) throw ConfigError("cross_entropy: negative example weight");
      total += w;
    }
    if (total <= 0.0) throw ConfigError("cross_entropy: example weights sum to zero");
    for (int i = 0; i < B; ++i) u[static_cast<size_t>(i)] = (*weights)[static_cast<size_t>(i)] / total;
  }
  double loss = 0.0;
  for (int r = 0; r < B; ++r) {
    const int y = labels[static_cast<size_t>(r)];
    if (y < 0 || y >= C) throw DataError("cross_entropy: label out of range");
    loss -= u[static_cast<size_t>(r)] * lp.at(r, y);
  }
  return g.custom(Tensor::scalar(loss), {log_probs},
                  [log_probs, labels, u = std::move(u)](Graph& gg, Graph::NodeId self) {
                    const double d = gg.grad(self)[0];
                    Tensor& dlp = gg.grad(log_probs);
                    for (size_t r = 0; r < labels.size(); ++r) {
                      dlp.at(static_cast<int>(r), labels[r]) -= d * u[r];
                    }
                  });
}

Graph::NodeId mse(Graph& g, Graph::NodeId pred, Graph::NodeId target) {
  const Tensor& pv = g.value(pred);
  const Tensor& tv = g.value(target);
  if (!pv.same_shape(tv)) throw ConfigError("mse: shape mismatch");
  const int64_t n = pv.numel();
  double loss = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double d = pv[i] - tv[i];
    loss += d * d;
  }
  loss /= n > 0 ? static_cast<double>(n) : 1.0;
  return g.custom(Tensor::scalar(loss), {pred, target},
                  [pred, target, n](Graph& gg, Graph::NodeId self) {
                    const double d = gg.grad(self)[0];
                    const Tensor& pv2 = gg.value(pred);
                    const Tensor& tv2 = gg.value(target);
                    Tensor& dp = gg.grad(pred);
                    Tensor& dt = gg.grad(target);
                    const double s = 2.0 * d / static_cast<double>(n);
                    for (int64_t i = 0; i < n; ++i) {
                      const double diff = pv2[i] - tv2[i];
                      dp[i] += s * diff;
                      dt[i] -= s * diff;
                    }
                  });
}

}  // namespace mce
