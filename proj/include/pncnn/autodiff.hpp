#pragma once
#include <cassert>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "linalg.hpp"
#include "special.hpp"
#include "tensor.hpp"

namespace pncnn::ad {

struct Var {
  int id = -1;
  bool ok() const { return id >= 0; }
};

// Reverse-mode tape over whole tensors. Nodes are appended in program order,
// so iterating ids backwards is a reverse topological sweep. Ops that only
// combine constant inputs store no closure and cost nothing on backward.
class Tape {
 public:
  struct Node {
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool needs_grad = false;
    std::function<void(Tape&, const Tensor&)> back;
  };

  Var leaf(Tensor v, bool needs_grad = false) {
    Node n;
    n.value = std::move(v);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return Var{(int)nodes_.size() - 1};
  }
  Var constant(Tensor v) { return leaf(std::move(v), false); }
  Var constant(double v) { return leaf(Tensor::scalar(v), false); }

  const Tensor& val(Var x) const { return nodes_[(std::size_t)x.id].value; }
  double sval(Var x) const { return val(x).value(); }

  Tensor grad_of(Var x) const {
    const Node& n = nodes_[(std::size_t)x.id];
    if (n.has_grad) return n.grad;
    Tensor z = n.value;
    z.fill(0.0);
    return z;
  }

  void accum(int id, const Tensor& g) {
    Node& n = nodes_[(std::size_t)id];
    if (!n.needs_grad) return;
    if (!n.has_grad) {
      n.grad = g;
      n.has_grad = true;
    } else {
      axpy(1.0, g, n.grad);
    }
  }

  void backward(Var root) {
    check_shape(val(root).numel() == 1, "backward wants scalar root");
    accum(root.id, Tensor::scalar(1.0).reshaped(val(root).shape()));
    for (int id = root.id; id >= 0; --id) {
      Node& n = nodes_[(std::size_t)id];
      if (n.has_grad && n.back) n.back(*this, n.grad);
    }
  }

  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

  // ---- elementwise ----

  Var add(Var a, Var b) {
    const Tensor &av = val(a), &bv = val(b);
    if (av.numel() == 1 && bv.numel() == 1 && !av.same_shape(bv))
      return add(a, reshape(b, av.shape()));
    if (av.numel() == 1 && bv.numel() != 1) return add(b, a);
    Tensor out;
    if (bv.numel() == 1 && av.numel() != 1) {
      out = av;
      const double s = bv.value();
      for (std::size_t i = 0; i < out.numel(); ++i) out[i] += s;
    } else {
      out = pncnn::add(av, bv);
    }
    return make_(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
      if (t.val(b).numel() == 1 && t.val(a).numel() != 1)
        t.accum(b.id, Tensor::scalar(g.sum()).reshaped(t.val(b).shape()));
      else
        t.accum(b.id, g);
      t.accum(a.id, g);
    });
  }

  Var sub(Var a, Var b) {
    const Tensor &av = val(a), &bv = val(b);
    if (av.numel() == 1 && bv.numel() == 1 && !av.same_shape(bv))
      return sub(a, reshape(b, av.shape()));
    Tensor out;
    if (bv.numel() == 1 && av.numel() != 1) {
      out = av;
      const double s = bv.value();
      for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= s;
    } else if (av.numel() == 1 && bv.numel() != 1) {
      out = bv;
      const double s = av.value();
      for (std::size_t i = 0; i < out.numel(); ++i) out[i] = s - out[i];
    } else {
      out = pncnn::sub(av, bv);
    }
    return make_(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
      const bool sa = t.val(a).numel() == 1 && t.val(b).numel() != 1;
      const bool sb = t.val(b).numel() == 1 && t.val(a).numel() != 1;
      if (sa)
        t.accum(a.id, Tensor::scalar(g.sum()).reshaped(t.val(a).shape()));
      else
        t.accum(a.id, g);
      Tensor ng = g;
      for (std::size_t i = 0; i < ng.numel(); ++i) ng[i] = -ng[i];
      if (sb)
        t.accum(b.id, Tensor::scalar(ng.sum()).reshaped(t.val(b).shape()));
      else
        t.accum(b.id, ng);
    });
  }

  Var mul(Var a, Var b) {
    const Tensor &av = val(a), &bv = val(b);
    if (av.numel() == 1 && bv.numel() == 1 && !av.same_shape(bv))
      return mul(a, reshape(b, av.shape()));
    if (av.numel() == 1 && bv.numel() != 1) return mul(b, a);
    Tensor out;
    if (bv.numel() == 1 && av.numel() != 1) {
      out = pncnn::scale(av, bv.value());
    } else {
      check_shape(av.same_shape(bv), "mul shapes differ");
      out = av;
      for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
    }
    return make_(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
      const Tensor &av2 = t.val(a), &bv2 = t.val(b);
      if (bv2.numel() == 1 && av2.numel() != 1) {
        Tensor ga = pncnn::scale(g, bv2.value());
        t.accum(a.id, ga);
        double s = 0.0;
        for (std::size_t i = 0; i < g.numel(); ++i) s += g[i] * av2[i];
        t.accum(b.id, Tensor::scalar(s).reshaped(bv2.shape()));
      } else {
        Tensor ga = g, gb = g;
        for (std::size_t i = 0; i < g.numel(); ++i) {
          ga[i] *= bv2[i];
          gb[i] *= av2[i];
        }
        t.accum(a.id, ga);
        t.accum(b.id, gb);
      }
    });
  }

  Var div(Var a, Var b) {
    const Tensor &av = val(a), &bv = val(b);
    if (av.numel() == 1 && bv.numel() == 1 && !av.same_shape(bv))
      return div(a, reshape(b, av.shape()));
    Tensor out;
    if (bv.numel() == 1 && av.numel() != 1) {
      out = pncnn::scale(av, 1.0 / bv.value());
    } else {
      check_shape(av.same_shape(bv) || av.numel() == 1, "div shapes differ");
      if (av.numel() == 1 && bv.numel() != 1) {
        out = bv;
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av.value() / bv[i];
      } else {
        out = av;
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] /= bv[i];
      }
    }
    return make_(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
      const Tensor &av2 = t.val(a), &bv2 = t.val(b);
      if (bv2.numel() == 1 && av2.numel() != 1) {
        const double ib = 1.0 / bv2.value();
        t.accum(a.id, pncnn::scale(g, ib));
        double s = 0.0;
        for (std::size_t i = 0; i < g.numel(); ++i) s += g[i] * av2[i];
        t.accum(b.id, Tensor::scalar(-s * ib * ib).reshaped(bv2.shape()));
      } else if (av2.numel() == 1 && bv2.numel() != 1) {
        double sa = 0.0;
        Tensor gb = g;
        for (std::size_t i = 0; i < g.numel(); ++i) {
          sa += g[i] / bv2[i];
          gb[i] *= -av2.value() / (bv2[i] * bv2[i]);
        }
        t.accum(a.id, Tensor::scalar(sa).reshaped(av2.shape()));
        t.accum(b.id, gb);
      } else {
        Tensor ga = g, gb = g;
        for (std::size_t i = 0; i < g.numel(); ++i) {
          ga[i] /= bv2[i];
          gb[i] *= -av2[i] / (bv2[i] * bv2[i]);
        }
        t.accum(a.id, ga);
        t.accum(b.id, gb);
      }
    });
  }

  Var neg(Var a) { return scale(a, -1.0); }

  Var scale(Var a, double c) {
    return make_(pncnn::scale(val(a), c), {a},
                 [a, c](Tape& t, const Tensor& g) { t.accum(a.id, pncnn::scale(g, c)); });
  }

  Var shift(Var a, double c) {
    Tensor out = val(a);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += c;
    return make_(std::move(out), {a}, [a](Tape& t, const Tensor& g) { t.accum(a.id, g); });
  }

  Var vexp(Var a) {
    Tensor out = val(a);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::exp(out[i]);
    Var o = make_(std::move(out), {a}, nullptr);
    attach_(o, [a, o](Tape& t, const Tensor& g) {
      Tensor ga = g;
      const Tensor& ov = t.val(o);
      for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] *= ov[i];
      t.accum(a.id, ga);
    });
    return o;
  }

  Var vlog(Var a) {
    Tensor out = val(a);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::log(out[i]);
    return make_(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
      Tensor ga = g;
      const Tensor& av = t.val(a);
      for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] /= av[i];
      t.accum(a.id, ga);
    });
  }

  Var vsqrt(Var a) {
    Tensor out = val(a);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::sqrt(out[i]);
    Var o = make_(std::move(out), {a}, nullptr);
    attach_(o, [a, o](Tape& t, const Tensor& g) {
      Tensor ga = g;
      const Tensor& ov = t.val(o);
      for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] *= 0.5 / ov[i];
      t.accum(a.id, ga);
    });
    return o;
  }

  Var square(Var a) {
    Tensor out = val(a);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= out[i];
    return make_(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
      Tensor ga = g;
      const Tensor& av = t.val(a);
      for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] *= 2.0 * av[i];
      t.accum(a.id, ga);
    });
  }

  Var relu(Var a) {
    Tensor out = val(a);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::max(out[i], 0.0);
    return make_(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
      Tensor ga = g;
      const Tensor& av = t.val(a);
      for (std::size_t i = 0; i < ga.numel(); ++i)
        if (av[i] <= 0.0) ga[i] = 0.0;
      t.accum(a.id, ga);
    });
  }

  Var ncdf(Var a) {
    Tensor out = val(a);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = normal_cdf(out[i]);
    return make_(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
      Tensor ga = g;
      const Tensor& av = t.val(a);
      for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] *= normal_pdf(av[i]);
      t.accum(a.id, ga);
    });
  }

  // elementwise max(x_i, s) against a scalar floor; ties route to the floor
  Var vmax_scalar(Var x, Var s) {
    const double sv = sval(s);
    Tensor out = val(x);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::max(out[i], sv);
    return make_(std::move(out), {x, s}, [x, s](Tape& t, const Tensor& g) {
      const Tensor& xv = t.val(x);
      const double sv2 = t.sval(s);
      Tensor gx = g;
      double gs = 0.0;
      for (std::size_t i = 0; i < g.numel(); ++i) {
        if (xv[i] <= sv2) {
          gs += g[i];
          gx[i] = 0.0;
        }
      }
      t.accum(x.id, gx);
      t.accum(s.id, Tensor::scalar(gs).reshaped(t.val(s).shape()));
    });
  }

  // ---- shape ----

  Var reshape(Var a, std::vector<std::size_t> shape) {
    Tensor out = val(a).reshaped(shape);
    return make_(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
      t.accum(a.id, g.reshaped(t.val(a).shape()));
    });
  }

  Var transp(Var a) {
    return make_(pncnn::transpose(val(a)), {a},
                 [a](Tape& t, const Tensor& g) { t.accum(a.id, pncnn::transpose(g)); });
  }

  Var row(Var a, std::size_t i) {
    const Tensor& av = val(a);
    check_shape(av.rank() == 2, "row wants matrix");
    Tensor out{{av.dim(1)}};
    for (std::size_t j = 0; j < av.dim(1); ++j) out(j) = av(i, j);
    return make_(std::move(out), {a}, [a, i](Tape& t, const Tensor& g) {
      Tensor ga = t.val(a);
      ga.fill(0.0);
      for (std::size_t j = 0; j < ga.dim(1); ++j) ga(i, j) = g(j);
      t.accum(a.id, ga);
    });
  }

  Var col(Var a, std::size_t j) {
    const Tensor& av = val(a);
    check_shape(av.rank() == 2, "col wants matrix");
    Tensor out{{av.dim(0)}};
    for (std::size_t i = 0; i < av.dim(0); ++i) out(i) = av(i, j);
    return make_(std::move(out), {a}, [a, j](Tape& t, const Tensor& g) {
      Tensor ga = t.val(a);
      ga.fill(0.0);
      for (std::size_t i = 0; i < ga.dim(0); ++i) ga(i, j) = g(i);
      t.accum(a.id, ga);
    });
  }

  // columns[j] (each length-M vector) -> M x C matrix
  Var hstack_cols(const std::vector<Var>& cols) {
    check_shape(!cols.empty(), "hstack_cols wants columns");
    const std::size_t m = val(cols[0]).numel();
    Tensor out{{m, cols.size()}};
    for (std::size_t j = 0; j < cols.size(); ++j) {
      const Tensor& cv = val(cols[j]);
      check_shape(cv.numel() == m, "hstack_cols column length mismatch");
      for (std::size_t i = 0; i < m; ++i) out(i, j) = cv[i];
    }
    std::vector<Var> parents = cols;
    return make_multi_(std::move(out), parents, [cols](Tape& t, const Tensor& g) {
      for (std::size_t j = 0; j < cols.size(); ++j) {
        Tensor gc = t.val(cols[j]);
        gc.fill(0.0);
        for (std::size_t i = 0; i < gc.numel(); ++i) gc[i] = g(i, j);
        t.accum(cols[j].id, gc);
      }
    });
  }

  // parts (same shape S) -> tensor of shape [parts.size(), S...]
  Var stack_slabs(const std::vector<Var>& parts) {
    check_shape(!parts.empty(), "stack_slabs wants parts");
    const Tensor& p0 = val(parts[0]);
    std::vector<std::size_t> shape{parts.size()};
    for (auto d : p0.shape()) shape.push_back(d);
    Tensor out{shape};
    const std::size_t slab = p0.numel();
    for (std::size_t p = 0; p < parts.size(); ++p) {
      const Tensor& pv = val(parts[p]);
      check_shape(pv.numel() == slab, "stack_slabs shape mismatch");
      for (std::size_t i = 0; i < slab; ++i) out[p * slab + i] = pv[i];
    }
    std::vector<Var> parents = parts;
    return make_multi_(std::move(out), parents, [parts, slab](Tape& t, const Tensor& g) {
      for (std::size_t p = 0; p < parts.size(); ++p) {
        Tensor gp = t.val(parts[p]);
        for (std::size_t i = 0; i < slab; ++i) gp[i] = g[p * slab + i];
        t.accum(parts[p].id, gp);
      }
    });
  }

  Var diag_part(Var a) {
    const Tensor& av = val(a);
    check_shape(av.rank() == 2 && av.dim(0) == av.dim(1), "diag_part wants square");
    Tensor out{{av.dim(0)}};
    for (std::size_t i = 0; i < av.dim(0); ++i) out(i) = av(i, i);
    return make_(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
      Tensor ga = t.val(a);
      ga.fill(0.0);
      for (std::size_t i = 0; i < ga.dim(0); ++i) ga(i, i) = g(i);
      t.accum(a.id, ga);
    });
  }

  Var add_diag(Var a, Var v) {
    Tensor out = val(a);
    const Tensor& vv = val(v);
    check_shape(out.rank() == 2 && out.dim(0) == out.dim(1) && vv.numel() == out.dim(0),
                "add_diag shape mismatch");
    for (std::size_t i = 0; i < out.dim(0); ++i) out(i, i) += vv[i];
    return make_(std::move(out), {a, v}, [a, v](Tape& t, const Tensor& g) {
      t.accum(a.id, g);
      Tensor gv{{g.dim(0)}};
      for (std::size_t i = 0; i < g.dim(0); ++i) gv(i) = g(i, i);
      t.accum(v.id, gv);
    });
  }

  // out(i,j) = a(i,j) * v(j)
  Var scale_cols(Var a, Var v) {
    Tensor out = val(a);
    const Tensor& vv = val(v);
    check_shape(out.rank() == 2 && vv.numel() == out.dim(1), "scale_cols shape mismatch");
    for (std::size_t i = 0; i < out.dim(0); ++i)
      for (std::size_t j = 0; j < out.dim(1); ++j) out(i, j) *= vv[j];
    return make_(std::move(out), {a, v}, [a, v](Tape& t, const Tensor& g) {
      const Tensor &av2 = t.val(a), &vv2 = t.val(v);
      Tensor ga = g;
      Tensor gv{{g.dim(1)}};
      for (std::size_t i = 0; i < g.dim(0); ++i)
        for (std::size_t j = 0; j < g.dim(1); ++j) {
          gv(j) += g(i, j) * av2(i, j);
          ga(i, j) *= vv2[j];
        }
      t.accum(a.id, ga);
      t.accum(v.id, gv.reshaped(t.val(v).shape()));
    });
  }

  Var add_rowvec(Var a, Var v) {
    Tensor out = val(a);
    const Tensor& vv = val(v);
    check_shape(out.rank() == 2 && vv.numel() == out.dim(1), "add_rowvec shape mismatch");
    for (std::size_t i = 0; i < out.dim(0); ++i)
      for (std::size_t j = 0; j < out.dim(1); ++j) out(i, j) += vv[j];
    return make_(std::move(out), {a, v}, [a, v](Tape& t, const Tensor& g) {
      t.accum(a.id, g);
      Tensor gv{{g.dim(1)}};
      for (std::size_t i = 0; i < g.dim(0); ++i)
        for (std::size_t j = 0; j < g.dim(1); ++j) gv(j) += g(i, j);
      t.accum(v.id, gv);
    });
  }

  // ---- reductions ----

  Var sum(Var a) {
    return make_(Tensor::scalar(val(a).sum()), {a}, [a](Tape& t, const Tensor& g) {
      Tensor ga = t.val(a);
      ga.fill(g.value());
      t.accum(a.id, ga);
    });
  }

  Var colsum(Var a) {
    const Tensor& av = val(a);
    check_shape(av.rank() == 2, "colsum wants matrix");
    Tensor out{{av.dim(1)}};
    for (std::size_t i = 0; i < av.dim(0); ++i)
      for (std::size_t j = 0; j < av.dim(1); ++j) out(j) += av(i, j);
    return make_(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
      Tensor ga = t.val(a);
      for (std::size_t i = 0; i < ga.dim(0); ++i)
        for (std::size_t j = 0; j < ga.dim(1); ++j) ga(i, j) = g(j);
      t.accum(a.id, ga);
    });
  }

  Var logsumexp(Var a) {
    const Tensor& av = val(a);
    double m = av[0];
    for (std::size_t i = 1; i < av.numel(); ++i) m = std::max(m, av[i]);
    double s = 0.0;
    for (std::size_t i = 0; i < av.numel(); ++i) s += std::exp(av[i] - m);
    return make_(Tensor::scalar(m + std::log(s)), {a}, [a](Tape& t, const Tensor& g) {
      const Tensor& av2 = t.val(a);
      double m2 = av2[0];
      for (std::size_t i = 1; i < av2.numel(); ++i) m2 = std::max(m2, av2[i]);
      double s2 = 0.0;
      for (std::size_t i = 0; i < av2.numel(); ++i) s2 += std::exp(av2[i] - m2);
      Tensor ga = av2;
      for (std::size_t i = 0; i < ga.numel(); ++i)
        ga[i] = g.value() * std::exp(av2[i] - m2) / s2;
      t.accum(a.id, ga);
    });
  }

  Var pick(Var a, std::size_t idx) {
    return make_(Tensor::scalar(val(a)[idx]), {a}, [a, idx](Tape& t, const Tensor& g) {
      Tensor ga = t.val(a);
      ga.fill(0.0);
      ga[idx] = g.value();
      t.accum(a.id, ga);
    });
  }

  Var dotv(Var a, Var b) {
    return make_(Tensor::scalar(pncnn::dot(val(a), val(b))), {a, b},
                 [a, b](Tape& t, const Tensor& g) {
                   t.accum(a.id, pncnn::scale(t.val(b), g.value()).reshaped(t.val(a).shape()));
                   t.accum(b.id, pncnn::scale(t.val(a), g.value()).reshaped(t.val(b).shape()));
                 });
  }

  // ---- matrix ----

  Var matmul(Var a, Var b, bool ta = false, bool tb = false) {
    return make_(pncnn::matmul(val(a), val(b), ta, tb), {a, b},
                 [a, b, ta, tb](Tape& t, const Tensor& g) {
                   const Tensor &av = t.val(a), &bv = t.val(b);
                   if (!ta && !tb) {
                     t.accum(a.id, pncnn::matmul(g, bv, false, true));
                     t.accum(b.id, pncnn::matmul(av, g, true, false));
                   } else if (ta && !tb) {
                     t.accum(a.id, pncnn::matmul(bv, g, false, true));
                     t.accum(b.id, pncnn::matmul(av, g, false, false));
                   } else if (!ta && tb) {
                     t.accum(a.id, pncnn::matmul(g, bv, false, false));
                     t.accum(b.id, pncnn::matmul(g, av, true, false));
                   } else {
                     t.accum(a.id, pncnn::matmul(bv, g, true, true));
                     t.accum(b.id, pncnn::matmul(g, av, true, true));
                   }
                 });
  }

  // out_m = sum_n a(m,n) b(m,n)
  Var rowdot(Var a, Var b) {
    const Tensor &av = val(a), &bv = val(b);
    check_shape(av.rank() == 2 && av.same_shape(bv), "rowdot wants equal matrices");
    Tensor out{{av.dim(0)}};
    for (std::size_t i = 0; i < av.dim(0); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < av.dim(1); ++j) s += av(i, j) * bv(i, j);
      out(i) = s;
    }
    return make_(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
      const Tensor &av2 = t.val(a), &bv2 = t.val(b);
      Tensor ga = bv2, gb = av2;
      for (std::size_t i = 0; i < av2.dim(0); ++i) {
        const double gi = g(i);
        for (std::size_t j = 0; j < av2.dim(1); ++j) {
          ga(i, j) *= gi;
          gb(i, j) *= gi;
        }
      }
      t.accum(a.id, ga);
      t.accum(b.id, gb);
    });
  }

  // Lower Cholesky factor; throws NotPositiveDefinite like the plain routine.
  Var cholesky(Var a) {
    Tensor l = pncnn::cholesky(val(a));
    Var o = make_(std::move(l), {a}, nullptr);
    attach_(o, [a, o](Tape& t, const Tensor& g) {
      const Tensor& l2 = t.val(o);
      const std::size_t n = l2.dim(0);
      // mask incoming grad to lower triangle
      Tensor lbar = g;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) lbar(i, j) = 0.0;
      // P = Phi(L^T Lbar): lower triangle, halved diagonal
      Tensor p = pncnn::matmul(l2, lbar, true, false);
      for (std::size_t i = 0; i < n; ++i) {
        p(i, i) *= 0.5;
        for (std::size_t j = i + 1; j < n; ++j) p(i, j) = 0.0;
      }
      // S = L^{-T} P L^{-1}
      Tensor z = trisolve(l2, p, true, true);
      Tensor zt = pncnn::transpose(z);
      Tensor st = trisolve(l2, zt, true, true);
      Tensor s = pncnn::transpose(st);
      // symmetrize
      Tensor abar{{n, n}};
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) abar(i, j) = 0.5 * (s(i, j) + s(j, i));
      t.accum(a.id, abar);
    });
    return o;
  }

  // SPD inverse; gradient symmetrized since inputs are symmetric by construction.
  Var spd_inverse(Var a) {
    Tensor c = pncnn::spd_inverse(val(a));
    Var o = make_(std::move(c), {a}, nullptr);
    attach_(o, [a, o](Tape& t, const Tensor& g) {
      const Tensor& y = t.val(o);
      const std::size_t n = y.dim(0);
      Tensor gs{{n, n}};
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) gs(i, j) = 0.5 * (g(i, j) + g(j, i));
      Tensor yg = pncnn::matmul(y, gs);
      Tensor abar = pncnn::matmul(yg, y);
      for (std::size_t i = 0; i < abar.numel(); ++i) abar[i] = -abar[i];
      t.accum(a.id, abar);
    });
    return o;
  }

  // X = B L^{-T} (trans=true) or B L^{-1}; L lower triangular, B is [m,n].
  Var tri_right_solve(Var l, Var b, bool trans) {
    const Tensor &lv = val(l), &bv = val(b);
    check_shape(lv.rank() == 2 && lv.dim(0) == lv.dim(1) && bv.rank() == 2 &&
                    bv.dim(1) == lv.dim(0),
                "tri_right_solve shapes");
    Tensor x = pncnn::transpose(trisolve(lv, pncnn::transpose(bv), true, !trans));
    Var o = make_(std::move(x), {l, b}, nullptr);
    attach_(o, [l, b, o, trans](Tape& t, const Tensor& g) {
      const Tensor& l2 = t.val(l);
      const std::size_t n = l2.dim(0);
      Tensor gbt = trisolve(l2, pncnn::transpose(g), true, trans);
      Tensor gl = pncnn::matmul(gbt, t.val(o));
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) gl(i, j) = i < j ? 0.0 : -gl(i, j);
      t.accum(l.id, gl);
      t.accum(b.id, pncnn::transpose(gbt));
    });
    return o;
  }

  // ---- fused kernel ops ----

  // out(m,n) = s * exp(-1/2 u^T P u), u = delta(m,n,:) + beta.
  // delta is constant pairwise-offset data shared by value.
  Var gaussian_matrix(std::shared_ptr<const Tensor> delta, Var beta, Var p, Var s) {
    const Tensor& dv = *delta;
    check_shape(dv.rank() == 3, "gaussian_matrix wants [M,N,d] offsets");
    const std::size_t m = dv.dim(0), n = dv.dim(1), d = dv.dim(2);
    const Tensor &bv = val(beta), &pv = val(p);
    check_shape(bv.numel() == d && pv.rank() == 2 && pv.dim(0) == d && pv.dim(1) == d,
                "gaussian_matrix parameter shapes");
    const double sv = sval(s);
    Tensor out{{m, n}};
    std::vector<double> u(d), pu(d);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double q = 0.0;
        for (std::size_t x = 0; x < d; ++x) {
          u[x] = dv(i, j, x) + bv[x];
        }
        for (std::size_t x = 0; x < d; ++x) {
          double acc = 0.0;
          for (std::size_t y = 0; y < d; ++y) acc += pv(x, y) * u[y];
          q += u[x] * acc;
        }
        out(i, j) = sv * std::exp(-0.5 * q);
      }
    Var o = make_(std::move(out), {beta, p, s}, nullptr);
    attach_(o, [delta, beta, p, s, o, m, n, d](Tape& t, const Tensor& g) {
      const Tensor& dv2 = *delta;
      const Tensor& bv2 = t.val(beta);
      const Tensor& pv2 = t.val(p);
      const Tensor& ov = t.val(o);
      const double sv2 = t.sval(s);
      Tensor gb{{d}};
      Tensor gp{{d, d}};
      double gsv = 0.0;
      std::vector<double> u(d), psu(d);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double w = g(i, j) * ov(i, j);
          if (w == 0.0) continue;
          gsv += g(i, j) * ov(i, j) / sv2;
          for (std::size_t x = 0; x < d; ++x) u[x] = dv2(i, j, x) + bv2[x];
          for (std::size_t x = 0; x < d; ++x) {
            double acc = 0.0;
            for (std::size_t y = 0; y < d; ++y)
              acc += 0.5 * (pv2(x, y) + pv2(y, x)) * u[y];
            psu[x] = acc;
          }
          for (std::size_t x = 0; x < d; ++x) {
            gb(x) -= w * psu[x];
            for (std::size_t y = 0; y < d; ++y) gp(x, y) -= 0.5 * w * u[x] * u[y];
          }
        }
      t.accum(beta.id, gb);
      t.accum(p.id, gp);
      t.accum(s.id, Tensor::scalar(gsv).reshaped(t.val(s).shape()));
    });
    return o;
  }

  // out = exp(-1/2 c * d2) elementwise over constant matrix d2
  Var exp_quad(std::shared_ptr<const Tensor> d2, Var c) {
    const Tensor& dv = *d2;
    const double cv = sval(c);
    Tensor out = dv;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::exp(-0.5 * cv * out[i]);
    Var o = make_(std::move(out), {c}, nullptr);
    attach_(o, [d2, c, o](Tape& t, const Tensor& g) {
      const Tensor& dv2 = *d2;
      const Tensor& ov = t.val(o);
      double gc = 0.0;
      for (std::size_t i = 0; i < ov.numel(); ++i) gc += g[i] * ov[i] * (-0.5 * dv2[i]);
      t.accum(c.id, Tensor::scalar(gc).reshaped(t.val(c).shape()));
    });
    return o;
  }

  // rectified Gaussian mean, elementwise over (mu, var)
  Var relu_mean(Var mu, Var var) {
    const Tensor &mv = val(mu), &vv = val(var);
    check_shape(mv.same_shape(vv), "relu_mean shapes differ");
    Tensor out = mv;
    for (std::size_t i = 0; i < out.numel(); ++i)
      out[i] = relu_mean_var(mv[i], vv[i]).mean;
    return make_(std::move(out), {mu, var}, [mu, var](Tape& t, const Tensor& g) {
      const Tensor &mv2 = t.val(mu), &vv2 = t.val(var);
      Tensor gm = g, gv = g;
      for (std::size_t i = 0; i < g.numel(); ++i) {
        const double sd = std::sqrt(std::max(vv2[i], 0.0));
        if (sd < 1e-8) {
          gm[i] *= (mv2[i] > 0.0) ? 1.0 : 0.0;
          gv[i] = 0.0;
        } else {
          const double tt = mv2[i] / sd;
          gm[i] *= normal_cdf(tt);
          gv[i] *= normal_pdf(tt) / (2.0 * sd);
        }
      }
      t.accum(mu.id, gm);
      t.accum(var.id, gv);
    });
  }

  // rectified Gaussian variance, elementwise over (mu, var)
  Var relu_var(Var mu, Var var) {
    const Tensor &mv = val(mu), &vv = val(var);
    check_shape(mv.same_shape(vv), "relu_var shapes differ");
    Tensor out = mv;
    for (std::size_t i = 0; i < out.numel(); ++i)
      out[i] = relu_mean_var(mv[i], vv[i]).var;
    return make_(std::move(out), {mu, var}, [mu, var](Tape& t, const Tensor& g) {
      const Tensor &mv2 = t.val(mu), &vv2 = t.val(var);
      Tensor gm = g, gv = g;
      for (std::size_t i = 0; i < g.numel(); ++i) {
        const double sd = std::sqrt(std::max(vv2[i], 0.0));
        if (sd < 1e-8) {
          gm[i] = 0.0;
          gv[i] *= (mv2[i] > 0.0) ? 1.0 : 0.0;
        } else {
          const double tt = mv2[i] / sd;
          const double cdf = normal_cdf(tt), pdf = normal_pdf(tt);
          const double mean = mv2[i] * cdf + sd * pdf;
          gm[i] *= 2.0 * mean * (1.0 - cdf);
          gv[i] *= cdf - mean * pdf / sd;
        }
      }
      t.accum(mu.id, gm);
      t.accum(var.id, gv);
    });
  }

  // out(k,k',m) = pp(k,k') - n(k,k',m)
  Var sub_broadcast_last(Var pp, Var n) {
    const Tensor &pv = val(pp), &nv = val(n);
    check_shape(pv.rank() == 2 && nv.rank() == 3 && nv.dim(0) == pv.dim(0) &&
                    nv.dim(1) == pv.dim(1),
                "sub_broadcast_last shapes");
    Tensor out = nv;
    const std::size_t kk = pv.numel(), m = nv.dim(2);
    for (std::size_t i = 0; i < kk; ++i)
      for (std::size_t j = 0; j < m; ++j) out[i * m + j] = pv[i] - nv[i * m + j];
    return make_(std::move(out), {pp, n}, [pp, n](Tape& t, const Tensor& g) {
      const Tensor& pv2 = t.val(pp);
      const std::size_t kk = pv2.numel(), m = t.val(n).dim(2);
      Tensor gp = pv2;
      gp.fill(0.0);
      Tensor gn = g;
      for (std::size_t i = 0; i < kk; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
          s += g[i * m + j];
          gn[i * m + j] = -g[i * m + j];
        }
        gp[i] = s;
      }
      t.accum(pp.id, gp);
      t.accum(n.id, gn);
    });
  }

  // out(m,alpha) = sum_beta sum_{k,k'} W(k,alpha,beta) W(k',alpha,beta) G_beta(k,k',m)
  // W: [K, co, ci], g_parts: ci tensors of shape [K, K, M]
  Var var_quadform(Var w, const std::vector<Var>& g_parts) {
    const Tensor& wv = val(w);
    check_shape(wv.rank() == 3, "var_quadform wants W[K,co,ci]");
    const std::size_t kk = wv.dim(0), co = wv.dim(1), ci = wv.dim(2);
    check_shape(g_parts.size() == ci, "var_quadform wants one G per input channel");
    const Tensor& g0 = val(g_parts[0]);
    check_shape(g0.rank() == 3 && g0.dim(0) == kk && g0.dim(1) == kk, "var_quadform G shape");
    const std::size_t m = g0.dim(2);

    Tensor out{{m, co}};
    Tensor wbeta{{kk, co}};
    for (std::size_t b = 0; b < ci; ++b) {
      const Tensor& gb = val(g_parts[b]);
      for (std::size_t k = 0; k < kk; ++k)
        for (std::size_t a = 0; a < co; ++a) wbeta(k, a) = wv(k, a, b);
      // H[a][(k2,mm)] = sum_k1 W(k1,a) G(k1,k2,mm)
      Tensor h = pncnn::matmul(wbeta.reshaped({kk, co}), gb.reshaped({kk, kk * m}), true, false);
      for (std::size_t a = 0; a < co; ++a)
        for (std::size_t k2 = 0; k2 < kk; ++k2) {
          const double wk = wbeta(k2, a);
          if (wk == 0.0) continue;
          const double* hrow = h.data() + (a * kk + k2) * m;
          double* orow = out.data();
          for (std::size_t mm = 0; mm < m; ++mm) orow[mm * co + a] += wk * hrow[mm];
        }
    }
    std::vector<Var> parents = g_parts;
    parents.push_back(w);
    return make_multi_(std::move(out), parents, [w, g_parts, kk, co, ci, m](Tape& t, const Tensor& g) {
      const Tensor& wv2 = t.val(w);
      Tensor gw = wv2;
      gw.fill(0.0);
      Tensor wbeta{{kk, co}};
      for (std::size_t b = 0; b < ci; ++b) {
        const Tensor& gbv = t.val(g_parts[b]);
        for (std::size_t k = 0; k < kk; ++k)
          for (std::size_t a = 0; a < co; ++a) wbeta(k, a) = wv2(k, a, b);
        // Gbar(k,k',mm) = sum_a W(k,a)W(k',a) gout(mm,a)
        Tensor amat{{kk * kk, co}};
        for (std::size_t k1 = 0; k1 < kk; ++k1)
          for (std::size_t k2 = 0; k2 < kk; ++k2)
            for (std::size_t a = 0; a < co; ++a)
              amat(k1 * kk + k2, a) = wbeta(k1, a) * wbeta(k2, a);
        Tensor gbar = pncnn::matmul(amat, g, false, true);  // [K*K, M]
        t.accum(g_parts[b].id, gbar.reshaped({kk, kk, m}));
        // Wbar(k,a) += sum_mm gout(mm,a) sum_k' W(k',a)(G(k,k',mm)+G(k',k,mm))
        Tensor gsym{{kk * kk, m}};
        for (std::size_t k1 = 0; k1 < kk; ++k1)
          for (std::size_t k2 = 0; k2 < kk; ++k2)
            for (std::size_t mm = 0; mm < m; ++mm)
              gsym(k1 * kk + k2, mm) = gbv(k1, k2, mm) + gbv(k2, k1, mm);
        Tensor f = pncnn::matmul(gsym, g, false, false);  // [K*K, co]
        for (std::size_t k1 = 0; k1 < kk; ++k1)
          for (std::size_t a = 0; a < co; ++a) {
            double s = 0.0;
            for (std::size_t k2 = 0; k2 < kk; ++k2)
              s += f(k1 * kk + k2, a) * wbeta(k2, a);
            gw(k1, a, b) += s;
          }
      }
      t.accum(w.id, gw);
    });
  }

 private:
  Var make_(Tensor value, std::initializer_list<Var> parents,
            std::function<void(Tape&, const Tensor&)> back) {
    bool ng = false;
    for (Var p : parents) {
      assert(p.id >= 0 && p.id < (int)nodes_.size());
      ng = ng || nodes_[(std::size_t)p.id].needs_grad;
    }
    Node n;
    n.value = std::move(value);
    n.needs_grad = ng;
    if (ng) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{(int)nodes_.size() - 1};
  }

  Var make_multi_(Tensor value, const std::vector<Var>& parents,
                  std::function<void(Tape&, const Tensor&)> back) {
    bool ng = false;
    for (Var p : parents) {
      assert(p.id >= 0 && p.id < (int)nodes_.size());
      ng = ng || nodes_[(std::size_t)p.id].needs_grad;
    }
    Node n;
    n.value = std::move(value);
    n.needs_grad = ng;
    if (ng) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{(int)nodes_.size() - 1};
  }

  // for closures that must reference their own output node
  void attach_(Var v, std::function<void(Tape&, const Tensor&)> back) {
    Node& n = nodes_[(std::size_t)v.id];
    if (n.needs_grad) n.back = std::move(back);
  }

  std::vector<Node> nodes_;
};

}  // namespace pncnn::ad
