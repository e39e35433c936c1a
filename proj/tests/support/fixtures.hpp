#pragma once

#include <map>
#include <tuple>
#include <vector>

#include "neas/archspace.hpp"
#include "neas/supernet.hpp"
#include "oracles.hpp"

namespace fixture {

inline std::vector<neas::OperatorSpec> ops(int n) {
  const neas::OperatorSpec all[] = {{0, neas::OpKind::conv, 3, 1}, {1, neas::OpKind::conv, 3, 2},
                                    {2, neas::OpKind::conv, 5, 1}, {3, neas::OpKind::conv, 5, 2},
                                    {4, neas::OpKind::conv, 7, 1}, {5, neas::OpKind::conv, 7, 2},
                                    {6, neas::OpKind::skip, 1, 1}};
  return {all, all + n};
}

inline std::vector<neas::LayerSpec> layers(int d, int n_ops, int width = 4, int size = 8) {
  std::vector<neas::LayerSpec> out;
  for (int m = 1; m <= d; ++m) {
    neas::LayerSpec l;
    l.index = m;
    l.in_channels = width;
    l.out_channels = width;
    l.in_size = size;
    l.candidates = ops(n_ops);
    out.push_back(l);
  }
  return out;
}

inline neas::SearchSpaceState space(int d, int n_ops, int k, int s_min, int s_max) {
  return neas::SearchSpaceState::full(layers(d, n_ops), k, s_min, s_max);
}

inline neas::NetworkPlan plan(int d, int n_ops, int width = 4, int size = 8, int classes = 4) {
  neas::NetworkPlan p;
  p.stem = {1, width, 1, size, 3};
  p.layers = layers(d, n_ops, width, size);
  p.num_classes = classes;
  return p;
}

// Plain description of a space for the independent revalidator.
inline oracle::FamilyDesc family(const neas::SearchSpaceState& space, const neas::StemSpec& stem,
                                 int classes) {
  oracle::FamilyDesc f;
  f.stem_in = stem.in_channels;
  f.stem_out = stem.out_channels;
  f.stem_kernel = stem.kernel_size;
  f.stem_stride = stem.stride;
  f.image = stem.in_size;
  f.classes = classes;
  f.k = space.k();
  f.s_min = space.s_min();
  f.s_max = space.s_max();
  for (int m = 1; m <= space.depth(); ++m) {
    const auto& l = space.layer(m);
    oracle::LayerDesc d{l.in_channels, l.out_channels, l.stride, l.in_size, {}};
    for (const auto& op : l.candidates) {
      d.ops[op.op_id] = {op.kind == neas::OpKind::skip, op.kernel_size, op.expansion};
    }
    f.layers.push_back(d);
    std::set<std::vector<int>> surv;
    if (space.has_combos(m)) {
      for (const auto& c : space.survivors(m)) surv.insert(c.ops());
    }
    f.survivors.push_back(std::move(surv));
  }
  return f;
}

struct Moments {
  std::vector<double> mean;
  std::vector<double> var;  // biased
};

// Per-channel moments of every BN input of `arch`'s blocks over `probe` as a
// single batch, keyed by (layer, op, bn index). The stage inputs come from
// a calibrate-mode trace; the BN inputs are recomputed from them and the
// moments accumulated here in plain loops.
inline std::map<std::tuple<int, int, int>, Moments> probe_moments(
    const neas::Supernet<double>& net, const neas::EnsembleArchitecture& arch,
    const neas::Tensor<double>& probe) {
  using namespace neas;
  std::map<std::tuple<int, int, int>, Moments> out;
  auto moments = [](const Tensor<double>& x) {
    Moments m;
    const double count = static_cast<double>(x.n()) * x.h() * x.w();
    for (int c = 0; c < x.c(); ++c) {
      double s = 0;
      for (int n = 0; n < x.n(); ++n) {
        for (int y = 0; y < x.h(); ++y) {
          for (int z = 0; z < x.w(); ++z) s += x(n, c, y, z);
        }
      }
      const double mu = s / count;
      double ss = 0;
      for (int n = 0; n < x.n(); ++n) {
        for (int y = 0; y < x.h(); ++y) {
          for (int z = 0; z < x.w(); ++z) ss += (x(n, c, y, z) - mu) * (x(n, c, y, z) - mu);
        }
      }
      m.mean.push_back(mu);
      m.var.push_back(ss / count);
    }
    return m;
  };
  auto visit = [&](const ParamBlock<double>& b, const BlockCache<double>& c) {
    const auto& g = b.geometry;
    if (b.kind == BlockKind::stem) {
      out[{b.layer, b.op_id, 0}] =
          moments(conv2d_forward(c.stage_in[0], b.weights[0], g.out_channels, g.kernel_size, g.stride));
      return;
    }
    out[{b.layer, b.op_id, 0}] = moments(pointwise_forward(c.stage_in[0], b.weights[0], g.hidden));
    out[{b.layer, b.op_id, 1}] =
        moments(depthwise_forward(c.stage_in[1], b.weights[3], g.kernel_size, g.stride));
    out[{b.layer, b.op_id, 2}] =
        moments(pointwise_forward(c.stage_in[2], b.weights[6], g.out_channels));
  };
  EnsembleTrace<double> trace;
  forward_ensemble(net, arch, probe, Mode::calibrate, &trace);
  visit(net.stem(), trace.stem);
  for (int m = 1; m <= arch.split_point; ++m) {
    const auto& c = trace.prefix[static_cast<std::size_t>(m - 1)];
    if (c) visit(net.block(m, arch.op_at(0, m)), *c);
  }
  for (int p = 0; p < arch.k; ++p) {
    for (int m = arch.split_point + 1; m <= arch.depth(); ++m) {
      const auto& c = trace.paths[static_cast<std::size_t>(p)][static_cast<std::size_t>(m - arch.split_point - 1)];
      if (c) visit(net.block(m, arch.op_at(p, m)), *c);
    }
  }
  return out;
}

// Largest deviation between the running statistics of `arch`'s blocks and
// `expected`.
inline double bn_stat_deviation(const neas::Supernet<double>& net,
                                const std::map<std::tuple<int, int, int>, Moments>& expected) {
  double worst = 0;
  for (const auto& [key, m] : expected) {
    const auto [layer, op, i] = key;
    const auto& b = layer == 0 ? net.stem() : net.block(layer, op);
    const auto& st = b.bn[static_cast<std::size_t>(i)];
    for (std::size_t c = 0; c < m.mean.size(); ++c) {
      worst = std::max(worst, std::abs(st.mean[static_cast<Eigen::Index>(c)] - m.mean[c]));
      worst = std::max(worst, std::abs(st.var[static_cast<Eigen::Index>(c)] - m.var[c]));
    }
  }
  return worst;
}

// Path of `arch` as a standalone single-path architecture.
inline neas::EnsembleArchitecture single_path(const neas::EnsembleArchitecture& arch, int path) {
  neas::EnsembleArchitecture a;
  a.k = 1;
  a.split_point = arch.depth();
  a.shared_ops = arch.path_ops(path);
  return a;
}

}  // namespace fixture
