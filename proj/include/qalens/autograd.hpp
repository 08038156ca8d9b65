#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "qalens/errors.hpp"
#include "qalens/matrix.hpp"
#include "qalens/rng.hpp"

namespace qalens {

// Named trainable tensor. grad always matches value's shape and is all-zero
// right after zero_grad().
struct Parameter {
    std::string name;
    Matrix value;
    Matrix grad;

    Parameter() = default;
    Parameter(std::string n, Matrix v)
        : name(std::move(n)), value(std::move(v)), grad(value.rows, value.cols) {}

    void zero_grad() { grad.fill(0.0); }
};

// Reverse-mode tape over Matrix ops. A tape is built once per forward pass
// and discarded; Parameters persist across tapes and collect gradients when
// backward() runs. Single-threaded by contract (one tape per thread).
class Tape {
public:
    struct Var {
        std::size_t id = 0;
    };

    // Leaf referencing external storage, no gradient consumer.
    Var ref(const Matrix& m) { return push(&m, nullptr); }

    // Trainable leaf: backward() accumulates into p.grad.
    Var param(Parameter& p) { return push(&p.value, &p); }

    // Owned constant.
    Var input(Matrix m) {
        nodes_.push_back(Node{});
        nodes_.back().stored = std::move(m);
        nodes_.back().val = &nodes_.back().stored;
        return Var{nodes_.size() - 1};
    }

    Var zeros(std::size_t r, std::size_t c) { return input(Matrix(r, c)); }

    const Matrix& val(Var v) const { return *nodes_[v.id].val; }
    Matrix& grad(Var v) { return nodes_[v.id].grad; }

    Var matmul(Var a, Var b) {
        Var out = input(qalens::matmul(val(a), val(b)));
        node(out).back = [this, a, b, out]() {
            accumulate(grad(a), qalens::matmul_nt(grad(out), val(b)));
            accumulate(grad(b), qalens::matmul_tn(val(a), grad(out)));
        };
        return out;
    }

    // a * b^T (used for attention scores).
    Var matmul_nt(Var a, Var b) {
        Var out = input(qalens::matmul_nt(val(a), val(b)));
        node(out).back = [this, a, b, out]() {
            accumulate(grad(a), qalens::matmul(grad(out), val(b)));
            accumulate(grad(b), qalens::matmul_tn(grad(out), val(a)));
        };
        return out;
    }

    Var add(Var a, Var b) {
        const Matrix& av = val(a);
        const Matrix& bv = val(b);
        if (!av.same_shape(bv)) {
            throw DimensionError("add: shapes " + Matrix::shape_str(av.rows, av.cols) + " vs " +
                                 Matrix::shape_str(bv.rows, bv.cols));
        }
        Matrix m = av;
        for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] += bv.data[i];
        Var out = input(std::move(m));
        node(out).back = [this, a, b, out]() {
            accumulate(grad(a), grad(out));
            accumulate(grad(b), grad(out));
        };
        return out;
    }

    // x + bias, bias is 1 x cols broadcast over rows.
    Var add_row(Var x, Var bias) {
        const Matrix& xv = val(x);
        const Matrix& bv = val(bias);
        if (bv.rows != 1 || bv.cols != xv.cols) {
            throw DimensionError("add_row: bias " + Matrix::shape_str(bv.rows, bv.cols) +
                                 " vs matrix " + Matrix::shape_str(xv.rows, xv.cols));
        }
        Matrix m = xv;
        for (std::size_t i = 0; i < m.rows; ++i) {
            double* r = m.row_ptr(i);
            for (std::size_t j = 0; j < m.cols; ++j) r[j] += bv.data[j];
        }
        Var out = input(std::move(m));
        node(out).back = [this, x, bias, out]() {
            accumulate(grad(x), grad(out));
            Matrix& bg = grad(bias);
            const Matrix& og = grad(out);
            for (std::size_t i = 0; i < og.rows; ++i) {
                const double* r = og.row_ptr(i);
                for (std::size_t j = 0; j < og.cols; ++j) bg.data[j] += r[j];
            }
        };
        return out;
    }

    Var scale(Var a, double s) {
        Matrix m = val(a);
        for (double& v : m.data) v *= s;
        Var out = input(std::move(m));
        node(out).back = [this, a, s, out]() {
            const Matrix& og = grad(out);
            Matrix& ag = grad(a);
            for (std::size_t i = 0; i < og.data.size(); ++i) ag.data[i] += s * og.data[i];
        };
        return out;
    }

    Var gelu(Var a) {
        const Matrix& av = val(a);
        Matrix m(av.rows, av.cols);
        for (std::size_t i = 0; i < av.data.size(); ++i) {
            const double x = av.data[i];
            m.data[i] = 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2));
        }
        Var out = input(std::move(m));
        node(out).back = [this, a, out]() {
            const Matrix& av2 = val(a);
            const Matrix& og = grad(out);
            Matrix& ag = grad(a);
            for (std::size_t i = 0; i < av2.data.size(); ++i) {
                const double x = av2.data[i];
                const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
                const double pdf = std::exp(-0.5 * x * x) * 0.3989422804014326779;
                ag.data[i] += og.data[i] * (cdf + x * pdf);
            }
        };
        return out;
    }

    // Per-row layer norm with elementwise gain/bias (both 1 x cols).
    Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
        const Matrix& xv = val(x);
        const Matrix& gv = val(gain);
        const Matrix& bv = val(bias);
        if (gv.cols != xv.cols || bv.cols != xv.cols || gv.rows != 1 || bv.rows != 1) {
            throw DimensionError("layer_norm: gain/bias must be 1x" + std::to_string(xv.cols));
        }
        auto xhat = std::make_shared<Matrix>(xv.rows, xv.cols);
        auto inv_std = std::make_shared<std::vector<double>>(xv.rows);
        Matrix m(xv.rows, xv.cols);
        for (std::size_t i = 0; i < xv.rows; ++i) {
            const double* r = xv.row_ptr(i);
            double mu = 0.0;
            for (std::size_t j = 0; j < xv.cols; ++j) mu += r[j];
            mu /= static_cast<double>(xv.cols);
            double var = 0.0;
            for (std::size_t j = 0; j < xv.cols; ++j) var += (r[j] - mu) * (r[j] - mu);
            var /= static_cast<double>(xv.cols);
            const double is = 1.0 / std::sqrt(var + eps);
            (*inv_std)[i] = is;
            for (std::size_t j = 0; j < xv.cols; ++j) {
                const double xh = (r[j] - mu) * is;
                (*xhat)(i, j) = xh;
                m(i, j) = gv.data[j] * xh + bv.data[j];
            }
        }
        Var out = input(std::move(m));
        node(out).back = [this, x, gain, bias, out, xhat, inv_std]() {
            const Matrix& og = grad(out);
            const Matrix& gv2 = val(gain);
            Matrix& xg = grad(x);
            Matrix& gg = grad(gain);
            Matrix& bg = grad(bias);
            const std::size_t d = og.cols;
            for (std::size_t i = 0; i < og.rows; ++i) {
                const double* dy = og.row_ptr(i);
                const double* xh = xhat->row_ptr(i);
                double mean_dyh = 0.0, mean_dyh_xh = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    const double dyh = dy[j] * gv2.data[j];
                    mean_dyh += dyh;
                    mean_dyh_xh += dyh * xh[j];
                    gg.data[j] += dy[j] * xh[j];
                    bg.data[j] += dy[j];
                }
                mean_dyh /= static_cast<double>(d);
                mean_dyh_xh /= static_cast<double>(d);
                const double is = (*inv_std)[i];
                double* dx = xg.row_ptr(i);
                for (std::size_t j = 0; j < d; ++j) {
                    const double dyh = dy[j] * gv2.data[j];
                    dx[j] += is * (dyh - mean_dyh - xh[j] * mean_dyh_xh);
                }
            }
        };
        return out;
    }

    Var softmax_rows(Var x, const Mask& support) {
        Var out = input(qalens::softmax_rows(val(x), support));
        node(out).back = [this, x, out]() {
            const Matrix& y = val(out);
            const Matrix& dy = grad(out);
            Matrix& dx = grad(x);
            for (std::size_t i = 0; i < y.rows; ++i) {
                const double* yr = y.row_ptr(i);
                const double* dyr = dy.row_ptr(i);
                double dot = 0.0;
                for (std::size_t j = 0; j < y.cols; ++j) dot += yr[j] * dyr[j];
                double* dxr = dx.row_ptr(i);
                for (std::size_t j = 0; j < y.cols; ++j) dxr[j] += yr[j] * (dyr[j] - dot);
            }
        };
        return out;
    }

    Var softmax_rows(Var x) { return softmax_rows(x, Mask(val(x).rows, val(x).cols, true)); }

    Var slice_cols(Var x, std::size_t c0, std::size_t c1) {
        const Matrix& xv = val(x);
        Matrix m(xv.rows, c1 - c0);
        for (std::size_t i = 0; i < xv.rows; ++i) {
            const double* r = xv.row_ptr(i);
            double* o = m.row_ptr(i);
            for (std::size_t j = c0; j < c1; ++j) o[j - c0] = r[j];
        }
        Var out = input(std::move(m));
        node(out).back = [this, x, c0, c1, out]() {
            const Matrix& og = grad(out);
            Matrix& xg = grad(x);
            for (std::size_t i = 0; i < og.rows; ++i) {
                const double* o = og.row_ptr(i);
                double* r = xg.row_ptr(i);
                for (std::size_t j = c0; j < c1; ++j) r[j] += o[j - c0];
            }
        };
        return out;
    }

    Var concat_cols(const std::vector<Var>& parts) {
        std::size_t total = 0;
        const std::size_t rows = val(parts.front()).rows;
        for (Var p : parts) total += val(p).cols;
        Matrix m(rows, total);
        std::size_t off = 0;
        for (Var p : parts) {
            const Matrix& pv = val(p);
            for (std::size_t i = 0; i < rows; ++i) {
                const double* r = pv.row_ptr(i);
                double* o = m.row_ptr(i) + off;
                for (std::size_t j = 0; j < pv.cols; ++j) o[j] = r[j];
            }
            off += pv.cols;
        }
        Var out = input(std::move(m));
        node(out).back = [this, parts, out]() {
            const Matrix& og = grad(out);
            std::size_t off2 = 0;
            for (Var p : parts) {
                Matrix& pg = grad(p);
                for (std::size_t i = 0; i < og.rows; ++i) {
                    const double* o = og.row_ptr(i) + off2;
                    double* r = pg.row_ptr(i);
                    for (std::size_t j = 0; j < pg.cols; ++j) r[j] += o[j];
                }
                off2 += pg.cols;
            }
        };
        return out;
    }

    // Embedding lookup: one output row per id.
    Var gather_rows(Var table, std::vector<std::size_t> ids) {
        const Matrix& tv = val(table);
        Matrix m(ids.size(), tv.cols);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            const double* src = tv.row_ptr(ids[i]);
            double* dst = m.row_ptr(i);
            for (std::size_t j = 0; j < tv.cols; ++j) dst[j] = src[j];
        }
        Var out = input(std::move(m));
        node(out).back = [this, table, ids = std::move(ids), out]() {
            const Matrix& og = grad(out);
            Matrix& tg = grad(table);
            for (std::size_t i = 0; i < ids.size(); ++i) {
                const double* src = og.row_ptr(i);
                double* dst = tg.row_ptr(ids[i]);
                for (std::size_t j = 0; j < og.cols; ++j) dst[j] += src[j];
            }
        };
        return out;
    }

    Var row(Var x, std::size_t r) {
        const Matrix& xv = val(x);
        Matrix m(1, xv.cols);
        for (std::size_t j = 0; j < xv.cols; ++j) m.data[j] = xv(r, j);
        Var out = input(std::move(m));
        node(out).back = [this, x, r, out]() {
            const Matrix& og = grad(out);
            Matrix& xg = grad(x);
            double* dst = xg.row_ptr(r);
            for (std::size_t j = 0; j < og.cols; ++j) dst[j] += og.data[j];
        };
        return out;
    }

    Var reshape(Var x, std::size_t r, std::size_t c) {
        const Matrix& xv = val(x);
        if (r * c != xv.rows * xv.cols) {
            throw DimensionError("reshape: element count mismatch");
        }
        Matrix m(r, c);
        m.data = xv.data;
        Var out = input(std::move(m));
        node(out).back = [this, x, out]() {
            const Matrix& og = grad(out);
            Matrix& xg = grad(x);
            for (std::size_t i = 0; i < og.data.size(); ++i) xg.data[i] += og.data[i];
        };
        return out;
    }

    // Inverted dropout; identity when rate == 0.
    Var dropout(Var x, double rate, RngState& rng) {
        if (rate == 0.0) return x;
        const Matrix& xv = val(x);
        auto mask = std::make_shared<std::vector<double>>(xv.data.size());
        const double keep_scale = 1.0 / (1.0 - rate);
        Matrix m(xv.rows, xv.cols);
        for (std::size_t i = 0; i < xv.data.size(); ++i) {
            const double s = rng.next_double() < rate ? 0.0 : keep_scale;
            (*mask)[i] = s;
            m.data[i] = xv.data[i] * s;
        }
        Var out = input(std::move(m));
        node(out).back = [this, x, out, mask]() {
            const Matrix& og = grad(out);
            Matrix& xg = grad(x);
            for (std::size_t i = 0; i < og.data.size(); ++i) xg.data[i] += og.data[i] * (*mask)[i];
        };
        return out;
    }

    // Scalar -log(p[target]) over a 1 x C probability row, with the
    // cross-entropy probability floor.
    Var neg_log_pick(Var probs, std::size_t target, bool* floored = nullptr) {
        const Matrix& pv = val(probs);
        const double p = pv.data[target];
        double pc = p;
        if (pc < kProbFloor) {
            pc = kProbFloor;
            if (floored) *floored = true;
        }
        Matrix m(1, 1);
        m.data[0] = -std::log(pc);
        Var out = input(std::move(m));
        const bool clamped = p < kProbFloor;
        node(out).back = [this, probs, target, pc, clamped, out]() {
            if (clamped) return;
            grad(probs).data[target] += -grad(out).data[0] / pc;
        };
        return out;
    }

    // Runs all recorded backward steps in reverse order, then flushes leaf
    // gradients into their Parameters. seed scales dLoss (1/batch for means).
    void backward(Var loss, double seed = 1.0) {
        const Matrix& lv = val(loss);
        if (lv.rows != 1 || lv.cols != 1) {
            throw UsageError("backward: loss must be a 1x1 scalar");
        }
        if (!std::isfinite(lv.data[0])) {
            throw NumericError("backward: non-finite loss");
        }
        for (Node& n : nodes_) {
            n.grad = Matrix(n.val->rows, n.val->cols);
        }
        nodes_[loss.id].grad.data[0] = seed;
        for (std::size_t i = nodes_.size(); i > 0; --i) {
            if (nodes_[i - 1].back) nodes_[i - 1].back();
        }
        for (Node& n : nodes_) {
            if (n.sink) {
                for (std::size_t i = 0; i < n.grad.data.size(); ++i) {
                    n.sink->grad.data[i] += n.grad.data[i];
                }
            }
        }
    }

private:
    struct Node {
        Matrix stored;
        const Matrix* val = nullptr;
        Matrix grad;
        Parameter* sink = nullptr;
        std::function<void()> back;
    };

    Node& node(Var v) { return nodes_[v.id]; }

    Var push(const Matrix* external, Parameter* sink) {
        nodes_.push_back(Node{});
        nodes_.back().val = external;
        nodes_.back().sink = sink;
        return Var{nodes_.size() - 1};
    }

    static void accumulate(Matrix& dst, const Matrix& src) {
        for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += src.data[i];
    }

    std::deque<Node> nodes_;
};

}  // namespace qalens
