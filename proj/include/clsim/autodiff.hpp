#pragma once

// Reverse-mode automatic differentiation on matrix-valued nodes.
//
// A Tape owns a flat list of nodes appended in evaluation order; backward
// walks it in reverse. Nodes hold dense row-major matrices. Besides the
// usual linear-algebra ops there are fused domain ops (multi-head attention
// with relative-pose terms, window feature extraction, finite-difference
// path kinematics, the full-covariance Gaussian NLL) whose backward passes
// are hand-derived; each has a finite-difference test.
//
// Gradients are exact and evaluation order is fixed, so results are
// bit-reproducible run to run. Everything is single-threaded.

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "clsim/common.hpp"

namespace clsim::ad {

struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, 0.0) {}

    double& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
    double at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
    std::size_t size() const { return data.size(); }

    static Matrix zeros(int r, int c) { return Matrix(r, c); }
    static Matrix scalar(double v) {
        Matrix m(1, 1);
        m.data[0] = v;
        return m;
    }
    static Matrix row2(double x, double y) {
        Matrix m(1, 2);
        m.data[0] = x;
        m.data[1] = y;
        return m;
    }
};

class Tape;

// Lightweight handle to a tape node.
struct Value {
    Tape* tape = nullptr;
    int idx = -1;

    bool defined() const { return tape != nullptr; }
    inline int rows() const;
    inline int cols() const;
    inline const Matrix& val() const;
    inline double scalar() const;
};

struct Node {
    Matrix val;
    Matrix grad;                          // allocated lazily during backward
    bool needs_grad = false;
    int param_id = -1;                    // >= 0 when this leaf mirrors a parameter
    std::function<void(Tape&)> backward;  // null for constants/leaves
};

class Tape {
public:
    bool grad_enabled = true;

    Node& node(int i) { return nodes_[static_cast<std::size_t>(i)]; }
    const Node& node(int i) const { return nodes_[static_cast<std::size_t>(i)]; }
    int size() const { return static_cast<int>(nodes_.size()); }

    Value constant(Matrix m) {
        Node n;
        n.val = std::move(m);
        return push(std::move(n));
    }

    Value leaf(Matrix m, int param_id = -1) {
        Node n;
        n.val = std::move(m);
        n.needs_grad = grad_enabled;
        n.param_id = param_id;
        return push(std::move(n));
    }

    // Two-phase node creation: allocate first so the backward closure can
    // capture the output index, then attach the closure.
    Value alloc(Matrix val, bool needs_grad) {
        Node n;
        n.val = std::move(val);
        n.needs_grad = grad_enabled && needs_grad;
        return push(std::move(n));
    }

    void set_backward(const Value& v, std::function<void(Tape&)> fn) {
        Node& n = node(v.idx);
        if (n.needs_grad) n.backward = std::move(fn);
    }

    // Runs backward from a scalar output; gradients accumulate in node.grad.
    void backward_from(const Value& out) {
        if (!grad_enabled) throw ContractError("backward on a no-grad tape");
        const Node& o = node(out.idx);
        if (o.val.rows != 1 || o.val.cols != 1) {
            throw ContractError("backward_from requires a scalar output");
        }
        for (auto& n : nodes_) {
            if (n.needs_grad) n.grad = Matrix::zeros(n.val.rows, n.val.cols);
        }
        if (!node(out.idx).needs_grad) return;  // output independent of all leaves
        node(out.idx).grad.data[0] = 1.0;
        for (int i = out.idx; i >= 0; --i) {
            Node& n = node(i);
            if (n.needs_grad && n.backward) n.backward(*this);
        }
    }

    // Leaf nodes carrying a parameter id, in creation order.
    std::vector<int> param_leaves() const {
        std::vector<int> out;
        for (int i = 0; i < size(); ++i) {
            if (nodes_[static_cast<std::size_t>(i)].param_id >= 0) out.push_back(i);
        }
        return out;
    }

private:
    Value push(Node n) {
        nodes_.push_back(std::move(n));
        return Value{this, static_cast<int>(nodes_.size()) - 1};
    }

    std::vector<Node> nodes_;
};

inline int Value::rows() const { return tape->node(idx).val.rows; }
inline int Value::cols() const { return tape->node(idx).val.cols; }
inline const Matrix& Value::val() const { return tape->node(idx).val; }
inline double Value::scalar() const {
    const Matrix& m = val();
    if (m.rows != 1 || m.cols != 1) throw ContractError("Value::scalar on non-scalar");
    return m.data[0];
}

namespace detail {

inline void check_same_tape(const Value& a, const Value& b) {
    if (a.tape != b.tape) throw ContractError("values live on different tapes");
}

inline bool wants(Tape& t, int idx) { return t.node(idx).needs_grad; }

inline void accumulate(Matrix& dst, const Matrix& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst.data[i] += src.data[i];
}

}  // namespace detail

// --- elementwise and linear ops ----------------------------------------------

inline Value add(const Value& a, const Value& b) {
    detail::check_same_tape(a, b);
    Tape& t = *a.tape;
    const Matrix& A = a.val();
    const Matrix& B = b.val();
    if (A.rows != B.rows || A.cols != B.cols) throw ContractError("add: shape mismatch");
    Matrix out = A;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += B.data[i];
    const bool ng = detail::wants(t, a.idx) || detail::wants(t, b.idx);
    Value o = t.alloc(std::move(out), ng);
    t.set_backward(o, [ai = a.idx, bi = b.idx, oi = o.idx](Tape& tp) {
        const Matrix& g = tp.node(oi).grad;
        if (tp.node(ai).needs_grad) detail::accumulate(tp.node(ai).grad, g);
        if (tp.node(bi).needs_grad) detail::accumulate(tp.node(bi).grad, g);
    });
    return o;
}

inline Value sub(const Value& a, const Value& b) {
    detail::check_same_tape(a, b);
    Tape& t = *a.tape;
    const Matrix& A = a.val();
    const Matrix& B = b.val();
    if (A.rows != B.rows || A.cols != B.cols) throw ContractError("sub: shape mismatch");
    Matrix out = A;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= B.data[i];
    const bool ng = detail::wants(t, a.idx) || detail::wants(t, b.idx);
    Value o = t.alloc(std::move(out), ng);
    t.set_backward(o, [ai = a.idx, bi = b.idx, oi = o.idx](Tape& tp) {
        const Matrix& g = tp.node(oi).grad;
        if (tp.node(ai).needs_grad) detail::accumulate(tp.node(ai).grad, g);
        if (tp.node(bi).needs_grad) {
            Matrix& gb = tp.node(bi).grad;
            for (std::size_t i = 0; i < gb.size(); ++i) gb.data[i] -= g.data[i];
        }
    });
    return o;
}

// Hadamard product.
inline Value mul(const Value& a, const Value& b) {
    detail::check_same_tape(a, b);
    Tape& t = *a.tape;
    const Matrix& A = a.val();
    const Matrix& B = b.val();
    if (A.rows != B.rows || A.cols != B.cols) throw ContractError("mul: shape mismatch");
    Matrix out = A;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= B.data[i];
    const bool ng = detail::wants(t, a.idx) || detail::wants(t, b.idx);
    Value o = t.alloc(std::move(out), ng);
    t.set_backward(o, [ai = a.idx, bi = b.idx, oi = o.idx](Tape& tp) {
        const Matrix& g = tp.node(oi).grad;
        const Matrix& A2 = tp.node(ai).val;
        const Matrix& B2 = tp.node(bi).val;
        if (tp.node(ai).needs_grad) {
            Matrix& ga = tp.node(ai).grad;
            for (std::size_t i = 0; i < ga.size(); ++i) ga.data[i] += g.data[i] * B2.data[i];
        }
        if (tp.node(bi).needs_grad) {
            Matrix& gb = tp.node(bi).grad;
            for (std::size_t i = 0; i < gb.size(); ++i) gb.data[i] += g.data[i] * A2.data[i];
        }
    });
    return o;
}

inline Value scale(const Value& a, double c) {
    Tape& t = *a.tape;
    Matrix out = a.val();
    for (auto& v : out.data) v *= c;
    Value o = t.alloc(std::move(out), detail::wants(t, a.idx));
    t.set_backward(o, [ai = a.idx, oi = o.idx, c](Tape& tp) {
        const Matrix& g = tp.node(oi).grad;
        Matrix& ga = tp.node(ai).grad;
        for (std::size_t i = 0; i < ga.size(); ++i) ga.data[i] += c * g.data[i];
    });
    return o;
}

inline Value matmul(const Value& a, const Value& b) {
    detail::check_same_tape(a, b);
    Tape& t = *a.tape;
    const Matrix& A = a.val();
    const Matrix& B = b.val();
    if (A.cols != B.rows) throw ContractError("matmul: inner dimension mismatch");
    Matrix out(A.rows, B.cols);
    for (int i = 0; i < A.rows; ++i) {
        for (int k = 0; k < A.cols; ++k) {
            const double av = A.at(i, k);
            if (av == 0.0) continue;
            for (int j = 0; j < B.cols; ++j) out.at(i, j) += av * B.at(k, j);
        }
    }
    const bool ng = detail::wants(t, a.idx) || detail::wants(t, b.idx);
    Value o = t.alloc(std::move(out), ng);
    t.set_backward(o, [ai = a.idx, bi = b.idx, oi = o.idx](Tape& tp) {
        const Matrix& g = tp.node(oi).grad;
        const Matrix& A2 = tp.node(ai).val;
        const Matrix& B2 = tp.node(bi).val;
        if (tp.node(ai).needs_grad) {
            Matrix& ga = tp.node(ai).grad;  // g * B^T
            for (int i = 0; i < g.rows; ++i) {
                for (int j = 0; j < g.cols; ++j) {
                    const double gv = g.at(i, j);
                    if (gv == 0.0) continue;
                    for (int k = 0; k < B2.rows; ++k) ga.at(i, k) += gv * B2.at(k, j);
                }
            }
        }
        if (tp.node(bi).needs_grad) {
            Matrix& gb = tp.node(bi).grad;  // A^T * g
            for (int i = 0; i < A2.rows; ++i) {
                for (int k = 0; k < A2.cols; ++k) {
                    const double av = A2.at(i, k);
                    if (av == 0.0) continue;
                    for (int j = 0; j < g.cols; ++j) gb.at(k, j) += av * g.at(i, j);
                }
            }
        }
    });
    return o;
}

// Adds a [1, c] row vector to every row.
inline Value add_rowvec(const Value& a, const Value& b) {
    detail::check_same_tape(a, b);
    Tape& t = *a.tape;
    const Matrix& A = a.val();
    const Matrix& B = b.val();
    if (B.rows != 1 || B.cols != A.cols) throw ContractError("add_rowvec: shape mismatch");
    Matrix out = A;
    for (int i = 0; i < A.rows; ++i) {
        for (int j = 0; j < A.cols; ++j) out.at(i, j) += B.at(0, j);
    }
    const bool ng = detail::wants(t, a.idx) || detail::wants(t, b.idx);
    Value o = t.alloc(std::move(out), ng);
    t.set_backward(o, [ai = a.idx, bi = b.idx, oi = o.idx](Tape& tp) {
        const Matrix& g = tp.node(oi).grad;
        if (tp.node(ai).needs_grad) detail::accumulate(tp.node(ai).grad, g);
        if (tp.node(bi).needs_grad) {
            Matrix& gb = tp.node(bi).grad;
            for (int i = 0; i < g.rows; ++i) {
                for (int j = 0; j < g.cols; ++j) gb.at(0, j) += g.at(i, j);
            }
        }
    });
    return o;
}

inline Value tanh_op(const Value& a) {
    Tape& t = *a.tape;
    Matrix out = a.val();
    for (auto& v : out.data) v = std::tanh(v);
    Value o = t.alloc(std::move(out), detail::wants(t, a.idx));
    t.set_backward(o, [ai = a.idx, oi = o.idx](Tape& tp) {
        const Matrix& g = tp.node(oi).grad;
        const Matrix& y = tp.node(oi).val;
        Matrix& ga = tp.node(ai).grad;
        for (std::size_t i = 0; i < ga.size(); ++i) {
            ga.data[i] += g.data[i] * (1.0 - y.data[i] * y.data[i]);
        }
    });
    return o;
}

inline Value softmax_rows(const Value& a) {
    Tape& t = *a.tape;
    Matrix out = a.val();
    for (int i = 0; i < out.rows; ++i) {
        double mx = out.at(i, 0);
        for (int j = 1; j < out.cols; ++j) mx = std::max(mx, out.at(i, j));
        double sum = 0.0;
        for (int j = 0; j < out.cols; ++j) {
            out.at(i, j) = std::exp(out.at(i, j) - mx);
            sum += out.at(i, j);
        }
        for (int j = 0; j < out.cols; ++j) out.at(i, j) /= sum;
    }
    Value o = t.alloc(std::move(out), detail::wants(t, a.idx));
    t.set_backward(o, [ai = a.idx, oi = o.idx](Tape& tp) {
        const Matrix& g = tp.node(oi).grad;
        const Matrix& y = tp.node(oi).val;
        Matrix& ga = tp.node(ai).grad;
        for (int i = 0; i < y.rows; ++i) {
            double dot = 0.0;
            for (int j = 0; j < y.cols; ++j) dot += g.at(i, j) * y.at(i, j);
            for (int j = 0; j < y.cols; ++j) {
                ga.at(i, j) += y.at(i, j) * (g.at(i, j) - dot);
            }
        }
    });
    return o;
}

inline Value layernorm_rows(const Value& a, const Value& gamma, const Value& beta,
                            double eps = 1e-5) {
    detail::check_same_tape(a, gamma);
    detail::check_same_tape(a, beta);
    Tape& t = *a.tape;
    const Matrix& A = a.val();
    const Matrix& G = gamma.val();
    const Matrix& B = beta.val();
    if (G.rows != 1 || G.cols != A.cols || B.rows != 1 || B.cols != A.cols) {
        throw ContractError("layernorm_rows: gamma/beta must be [1, cols]");
    }
    Matrix out(A.rows, A.cols);
    Matrix xhat(A.rows, A.cols);
    std::vector<double> inv_std(static_cast<std::size_t>(A.rows));
    for (int i = 0; i < A.rows; ++i) {
        double mean = 0.0;
        for (int j = 0; j < A.cols; ++j) mean += A.at(i, j);
        mean /= A.cols;
        double var = 0.0;
        for (int j = 0; j < A.cols; ++j) {
            const double d = A.at(i, j) - mean;
            var += d * d;
        }
        var /= A.cols;
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<std::size_t>(i)] = is;
        for (int j = 0; j < A.cols; ++j) {
            xhat.at(i, j) = (A.at(i, j) - mean) * is;
            out.at(i, j) = G.at(0, j) * xhat.at(i, j) + B.at(0, j);
        }
    }
    const bool ng = detail::wants(t, a.idx) || detail::wants(t, gamma.idx) ||
                    detail::wants(t, beta.idx);
    Value o = t.alloc(std::move(out), ng);
    t.set_backward(o, [ai = a.idx, gi = gamma.idx, bi = beta.idx, oi = o.idx,
                       xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& tp) {
        const Matrix& g = tp.node(oi).grad;
        const Matrix& G2 = tp.node(gi).val;
        const int rows = g.rows, cols = g.cols;
        if (tp.node(gi).needs_grad) {
            Matrix& gg = tp.node(gi).grad;
            for (int i = 0; i < rows; ++i) {
                for (int j = 0; j < cols; ++j) gg.at(0, j) += g.at(i, j) * xhat.at(i, j);
            }
        }
        if (tp.node(bi).needs_grad) {
            Matrix& gb = tp.node(bi).grad;
            for (int i = 0; i < rows; ++i) {
                for (int j = 0; j < cols; ++j) gb.at(0, j) += g.at(i, j);
            }
        }
        if (tp.node(ai).needs_grad) {
            Matrix& ga = tp.node(ai).grad;
            for (int i = 0; i < rows; ++i) {
                double m1 = 0.0, m2 = 0.0;
                for (int j = 0; j < cols; ++j) {
                    const double dxh = g.at(i, j) * G2.at(0, j);
                    m1 += dxh;
                    m2 += dxh * xhat.at(i, j);
                }
                m1 /= cols;
                m2 /= cols;
                for (int j = 0; j < cols; ++j) {
                    const double dxh = g.at(i, j) * G2.at(0, j);
                    ga.at(i, j) += inv_std[static_cast<std::size_t>(i)] *
                                   (dxh - m1 - xhat.at(i, j) * m2);
                }
            }
        }
    });
    return o;
}

// --- structural ops -----------------------------------------------------------

inline Value concat_rows(const std::vector<Value>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: empty input");
    Tape& t = *parts[0].tape;
    const int cols = parts[0].cols();
    int rows = 0;
    bool ng = false;
    for (const auto& p : parts) {
        detail::check_same_tape(parts[0], p);
        if (p.cols() != cols) throw ContractError("concat_rows: column mismatch");
        rows += p.rows();
        ng = ng || detail::wants(t, p.idx);
    }
    Matrix out(rows, cols);
    int r = 0;
    for (const auto& p : parts) {
        const Matrix& M = p.val();
        for (int i = 0; i < M.rows; ++i) {
            for (int j = 0; j < cols; ++j) out.at(r + i, j) = M.at(i, j);
        }
        r += M.rows;
    }
    std::vector<int> src;
    src.reserve(parts.size());
    for (const auto& p : parts) src.push_back(p.idx);
    Value o = t.alloc(std::move(out), ng);
    t.set_backward(o, [src = std::move(src), oi = o.idx](Tape& tp) {
        const Matrix& g = tp.node(oi).grad;
        int r0 = 0;
        for (int si : src) {
            Node& sn = tp.node(si);
            const int nr = sn.val.rows;
            if (sn.needs_grad) {
                for (int i = 0; i < nr; ++i) {
                    for (int j = 0; j < g.cols; ++j) sn.grad.at(i, j) += g.at(r0 + i, j);
                }
            }
            r0 += nr;
        }
    });
    return o;
}

inline Value concat_cols(const std::vector<Value>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: empty input");
    Tape& t = *parts[0].tape;
    const int rows = parts[0].rows();
    int cols = 0;
    bool ng = false;
    for (const auto& p : parts) {
        detail::check_same_tape(parts[0], p);
        if (p.rows() != rows) throw ContractError("concat_cols: row mismatch");
        cols += p.cols();
        ng = ng || detail::wants(t, p.idx);
    }
    Matrix out(rows, cols);
    int c = 0;
    for (const auto& p : parts) {
        const Matrix& M = p.val();
        for (int i = 0; i < rows; ++i) {
            for (int j = 0; j < M.cols; ++j) out.at(i, c + j) = M.at(i, j);
        }
        c += M.cols;
    }
    std::vector<int> src;
    for (const auto& p : parts) src.push_back(p.idx);
    Value o = t.alloc(std::move(out), ng);
    t.set_backward(o, [src = std::move(src), oi = o.idx](Tape& tp) {
        const Matrix& g = tp.node(oi).grad;
        int c0 = 0;
        for (int si : src) {
            Node& sn = tp.node(si);
            const int nc = sn.val.cols;
            if (sn.needs_grad) {
                for (int i = 0; i < g.rows; ++i) {
                    for (int j = 0; j < nc; ++j) sn.grad.at(i, j) += g.at(i, c0 + j);
                }
            }
            c0 += nc;
        }
    });
    return o;
}

inline Value slice_rows(const Value& a, int r0, int r1) {
    Tape& t = *a.tape;
    const Matrix& A = a.val();
    if (r0 < 0 || r1 > A.rows || r0 >= r1) throw ContractError("slice_rows: bad range");
    Matrix out(r1 - r0, A.cols);
    for (int i = r0; i < r1; ++i) {
        for (int j = 0; j < A.cols; ++j) out.at(i - r0, j) = A.at(i, j);
    }
    Value o = t.alloc(std::move(out), detail::wants(t, a.idx));
    t.set_backward(o, [ai = a.idx, oi = o.idx, r0](Tape& tp) {
        const Matrix& g = tp.node(oi).grad;
        Matrix& ga = tp.node(ai).grad;
        for (int i = 0; i < g.rows; ++i) {
            for (int j = 0; j < g.cols; ++j) ga.at(r0 + i, j) += g.at(i, j);
        }
    });
    return o;
}

inline Value slice_cols(const Value& a, int c0, int c1) {
    Tape& t = *a.tape;
    const Matrix& A = a.val();
    if (c0 < 0 || c1 > A.cols || c0 >= c1) throw ContractError("slice_cols: bad range");
    Matrix out(A.rows, c1 - c0);
    for (int i = 0; i < A.rows; ++i) {
        for (int j = c0; j < c1; ++j) out.at(i, j - c0) = A.at(i, j);
    }
    Value o = t.alloc(std::move(out), detail::wants(t, a.idx));
    t.set_backward(o, [ai = a.idx, oi = o.idx, c0](Tape& tp) {
        const Matrix& g = tp.node(oi).grad;
        Matrix& ga = tp.node(ai).grad;
        for (int i = 0; i < g.rows; ++i) {
            for (int j = 0; j < g.cols; ++j) ga.at(i, c0 + j) += g.at(i, j);
        }
    });
    return o;
}

// Row-major reinterpretation; element count must match.
inline Value reshape(const Value& a, int rows, int cols) {
    Tape& t = *a.tape;
    const Matrix& A = a.val();
    if (rows * cols != A.rows * A.cols) throw ContractError("reshape: element count mismatch");
    Matrix out(rows, cols);
    out.data = A.data;
    Value o = t.alloc(std::move(out), detail::wants(t, a.idx));
    t.set_backward(o, [ai = a.idx, oi = o.idx](Tape& tp) {
        const Matrix& g = tp.node(oi).grad;
        Matrix& ga = tp.node(ai).grad;
        for (std::size_t i = 0; i < ga.size(); ++i) ga.data[i] += g.data[i];
    });
    return o;
}

inline Value transpose(const Value& a) {
    Tape& t = *a.tape;
    const Matrix& A = a.val();
    Matrix out(A.cols, A.rows);
    for (int i = 0; i < A.rows; ++i) {
        for (int j = 0; j < A.cols; ++j) out.at(j, i) = A.at(i, j);
    }
    Value o = t.alloc(std::move(out), detail::wants(t, a.idx));
    t.set_backward(o, [ai = a.idx, oi = o.idx](Tape& tp) {
        const Matrix& g = tp.node(oi).grad;
        Matrix& ga = tp.node(ai).grad;
        for (int i = 0; i < g.rows; ++i) {
            for (int j = 0; j < g.cols; ++j) ga.at(j, i) += g.at(i, j);
        }
    });
    return o;
}

inline Value repeat_rows(const Value& a, int n) {
    Tape& t = *a.tape;
    const Matrix& A = a.val();
    if (A.rows != 1) throw ContractError("repeat_rows: input must have one row");
    Matrix out(n, A.cols);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < A.cols; ++j) out.at(i, j) = A.at(0, j);
    }
    Value o = t.alloc(std::move(out), detail::wants(t, a.idx));
    t.set_backward(o, [ai = a.idx, oi = o.idx](Tape& tp) {
        const Matrix& g = tp.node(oi).grad;
        Matrix& ga = tp.node(ai).grad;
        for (int i = 0; i < g.rows; ++i) {
            for (int j = 0; j < g.cols; ++j) ga.at(0, j) += g.at(i, j);
        }
    });
    return o;
}

inline Value gather_rows(const Value& a, std::vector<int> idx) {
    Tape& t = *a.tape;
    const Matrix& A = a.val();
    Matrix out(static_cast<int>(idx.size()), A.cols);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= A.rows) throw ContractError("gather_rows: index out of range");
        for (int j = 0; j < A.cols; ++j) out.at(static_cast<int>(i), j) = A.at(idx[i], j);
    }
    Value o = t.alloc(std::move(out), detail::wants(t, a.idx));
    t.set_backward(o, [ai = a.idx, oi = o.idx, idx = std::move(idx)](Tape& tp) {
        const Matrix& g = tp.node(oi).grad;
        Matrix& ga = tp.node(ai).grad;
        for (std::size_t i = 0; i < idx.size(); ++i) {
            for (int j = 0; j < g.cols; ++j) ga.at(idx[i], j) += g.at(static_cast<int>(i), j);
        }
    });
    return o;
}

// Mean over consecutive row blocks of size `block`: [n*block, c] -> [n, c].
inline Value block_mean_rows(const Value& a, int block) {
    Tape& t = *a.tape;
    const Matrix& A = a.val();
    if (block <= 0 || A.rows % block != 0) throw ContractError("block_mean_rows: bad block");
    const int n = A.rows / block;
    Matrix out(n, A.cols);
    for (int i = 0; i < n; ++i) {
        for (int k = 0; k < block; ++k) {
            for (int j = 0; j < A.cols; ++j) out.at(i, j) += A.at(i * block + k, j);
        }
        for (int j = 0; j < A.cols; ++j) out.at(i, j) /= block;
    }
    Value o = t.alloc(std::move(out), detail::wants(t, a.idx));
    t.set_backward(o, [ai = a.idx, oi = o.idx, block](Tape& tp) {
        const Matrix& g = tp.node(oi).grad;
        Matrix& ga = tp.node(ai).grad;
        for (int i = 0; i < g.rows; ++i) {
            for (int k = 0; k < block; ++k) {
                for (int j = 0; j < g.cols; ++j) {
                    ga.at(i * block + k, j) += g.at(i, j) / block;
                }
            }
        }
    });
    return o;
}

inline Value sum_all(const Value& a) {
    Tape& t = *a.tape;
    const Matrix& A = a.val();
    double s = 0.0;
    for (double v : A.data) s += v;
    Value o = t.alloc(Matrix::scalar(s), detail::wants(t, a.idx));
    t.set_backward(o, [ai = a.idx, oi = o.idx](Tape& tp) {
        const double g = tp.node(oi).grad.data[0];
        Matrix& ga = tp.node(ai).grad;
        for (auto& v : ga.data) v += g;
    });
    return o;
}

// Identity forward; blocks all gradient flow.
inline Value stop_gradient(const Value& a) {
    return a.tape->constant(a.val());
}

// --- fused domain ops ----------------------------------------------------------

// Multi-head attention with additive relative terms on keys and values.
// q: [nq, d], kv: [nk, d], rel_k/rel_v: [nq*nk, d] (row i*nk + j) or
// undefined Values for plain attention.
inline Value attention(const Value& q, const Value& kv_k, const Value& kv_v,
                       const Value& rel_k, const Value& rel_v, int n_heads) {
    detail::check_same_tape(q, kv_k);
    detail::check_same_tape(q, kv_v);
    Tape& t = *q.tape;
    const Matrix& Q = q.val();
    const Matrix& K = kv_k.val();
    const Matrix& V = kv_v.val();
    const int nq = Q.rows, nk = K.rows, d = Q.cols;
    if (K.cols != d || V.cols != d) throw ContractError("attention: dim mismatch");
    if (d % n_heads != 0) throw ContractError("attention: heads must divide dim");
    const bool has_rel = rel_k.defined();
    if (has_rel) {
        detail::check_same_tape(q, rel_k);
        detail::check_same_tape(q, rel_v);
        if (rel_k.rows() != nq * nk || rel_k.cols() != d || rel_v.rows() != nq * nk ||
            rel_v.cols() != d) {
            throw ContractError("attention: rel term shape mismatch");
        }
    }
    const int dh = d / n_heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

    const Matrix* RK = has_rel ? &rel_k.val() : nullptr;
    const Matrix* RV = has_rel ? &rel_v.val() : nullptr;

    Matrix out(nq, d);
    // attn weights saved for backward: [n_heads][nq, nk] flattened
    Matrix attn(n_heads * nq, nk);
    for (int h = 0; h < n_heads; ++h) {
        const int c0 = h * dh;
        for (int i = 0; i < nq; ++i) {
            double mx = -1e300;
            std::vector<double> s(static_cast<std::size_t>(nk));
            for (int j = 0; j < nk; ++j) {
                double dot = 0.0;
                for (int c = 0; c < dh; ++c) {
                    double kc = K.at(j, c0 + c);
                    if (has_rel) kc += RK->at(i * nk + j, c0 + c);
                    dot += Q.at(i, c0 + c) * kc;
                }
                s[static_cast<std::size_t>(j)] = dot * inv_sqrt;
                mx = std::max(mx, s[static_cast<std::size_t>(j)]);
            }
            double sum = 0.0;
            for (int j = 0; j < nk; ++j) {
                s[static_cast<std::size_t>(j)] = std::exp(s[static_cast<std::size_t>(j)] - mx);
                sum += s[static_cast<std::size_t>(j)];
            }
            for (int j = 0; j < nk; ++j) {
                const double a = s[static_cast<std::size_t>(j)] / sum;
                attn.at(h * nq + i, j) = a;
                for (int c = 0; c < dh; ++c) {
                    double vc = V.at(j, c0 + c);
                    if (has_rel) vc += RV->at(i * nk + j, c0 + c);
                    out.at(i, c0 + c) += a * vc;
                }
            }
        }
    }

    bool ng = detail::wants(t, q.idx) || detail::wants(t, kv_k.idx) || detail::wants(t, kv_v.idx);
    if (has_rel) ng = ng || detail::wants(t, rel_k.idx) || detail::wants(t, rel_v.idx);
    Value o = t.alloc(std::move(out), ng);
    const int rki = has_rel ? rel_k.idx : -1;
    const int rvi = has_rel ? rel_v.idx : -1;
    t.set_backward(o, [qi = q.idx, ki = kv_k.idx, vi = kv_v.idx, rki, rvi, oi = o.idx,
                       n_heads, dh, inv_sqrt, attn = std::move(attn)](Tape& tp) {
        const Matrix& g = tp.node(oi).grad;
        const Matrix& Q2 = tp.node(qi).val;
        const Matrix& K2 = tp.node(ki).val;
        const Matrix& V2 = tp.node(vi).val;
        const bool has_rel2 = rki >= 0;
        const Matrix* RK2 = has_rel2 ? &tp.node(rki).val : nullptr;
        const Matrix* RV2 = has_rel2 ? &tp.node(rvi).val : nullptr;
        const int nq = Q2.rows, nk = K2.rows;

        const bool wq = tp.node(qi).needs_grad;
        const bool wk = tp.node(ki).needs_grad;
        const bool wv = tp.node(vi).needs_grad;
        const bool wrk = has_rel2 && tp.node(rki).needs_grad;
        const bool wrv = has_rel2 && tp.node(rvi).needs_grad;

        for (int h = 0; h < n_heads; ++h) {
            const int c0 = h * dh;
            for (int i = 0; i < nq; ++i) {
                // d attn and d scores for row i
                std::vector<double> da(static_cast<std::size_t>(nk), 0.0);
                for (int j = 0; j < nk; ++j) {
                    const double a = attn.at(h * nq + i, j);
                    double dot = 0.0;
                    for (int c = 0; c < dh; ++c) {
                        double vc = V2.at(j, c0 + c);
                        if (has_rel2) vc += RV2->at(i * nk + j, c0 + c);
                        dot += g.at(i, c0 + c) * vc;
                        const double gv = g.at(i, c0 + c) * a;
                        if (wv) tp.node(vi).grad.at(j, c0 + c) += gv;
                        if (wrv) tp.node(rvi).grad.at(i * nk + j, c0 + c) += gv;
                    }
                    da[static_cast<std::size_t>(j)] = dot;
                }
                double inner = 0.0;
                for (int j = 0; j < nk; ++j) {
                    inner += attn.at(h * nq + i, j) * da[static_cast<std::size_t>(j)];
                }
                for (int j = 0; j < nk; ++j) {
                    const double a = attn.at(h * nq + i, j);
                    const double ds = a * (da[static_cast<std::size_t>(j)] - inner) * inv_sqrt;
                    if (ds == 0.0) continue;
                    for (int c = 0; c < dh; ++c) {
                        double kc = K2.at(j, c0 + c);
                        if (has_rel2) kc += RK2->at(i * nk + j, c0 + c);
                        if (wq) tp.node(qi).grad.at(i, c0 + c) += ds * kc;
                        const double gk = ds * Q2.at(i, c0 + c);
                        if (wk) tp.node(ki).grad.at(j, c0 + c) += gk;
                        if (wrk) tp.node(rki).grad.at(i * nk + j, c0 + c) += gk;
                    }
                }
            }
        }
    });
    return o;
}

// Pairwise relative pose features between query poses [nq, 3] and key poses
// [nk, 3] (columns x, y, heading): the key position in the query frame
// (scaled) plus sin/cos of the heading difference. Output [nq*nk, 4].
inline Value rel_pose_features(const Value& pq, const Value& pk, double scale) {
    detail::check_same_tape(pq, pk);
    Tape& t = *pq.tape;
    const Matrix& P = pq.val();
    const Matrix& Kp = pk.val();
    if (P.cols != 3 || Kp.cols != 3) throw ContractError("rel_pose_features: poses are [n, 3]");
    const int nq = P.rows, nk = Kp.rows;
    Matrix out(nq * nk, 4);
    for (int i = 0; i < nq; ++i) {
        const double c = std::cos(P.at(i, 2));
        const double s = std::sin(P.at(i, 2));
        for (int j = 0; j < nk; ++j) {
            const double dx = Kp.at(j, 0) - P.at(i, 0);
            const double dy = Kp.at(j, 1) - P.at(i, 1);
            const double dhead = Kp.at(j, 2) - P.at(i, 2);
            const int r = i * nk + j;
            out.at(r, 0) = scale * (c * dx + s * dy);
            out.at(r, 1) = scale * (-s * dx + c * dy);
            out.at(r, 2) = std::sin(dhead);
            out.at(r, 3) = std::cos(dhead);
        }
    }
    const bool ng = detail::wants(t, pq.idx) || detail::wants(t, pk.idx);
    Value o = t.alloc(std::move(out), ng);
    t.set_backward(o, [pi = pq.idx, ki = pk.idx, oi = o.idx, scale](Tape& tp) {
        const Matrix& g = tp.node(oi).grad;
        const Matrix& P2 = tp.node(pi).val;
        const Matrix& K2 = tp.node(ki).val;
        const bool wp = tp.node(pi).needs_grad;
        const bool wk = tp.node(ki).needs_grad;
        const int nq = P2.rows, nk = K2.rows;
        for (int i = 0; i < nq; ++i) {
            const double c = std::cos(P2.at(i, 2));
            const double s = std::sin(P2.at(i, 2));
            for (int j = 0; j < nk; ++j) {
                const int r = i * nk + j;
                const double g0 = g.at(r, 0), g1 = g.at(r, 1);
                const double g2 = g.at(r, 2), g3 = g.at(r, 3);
                const double dx = K2.at(j, 0) - P2.at(i, 0);
                const double dy = K2.at(j, 1) - P2.at(i, 1);
                const double dhead = K2.at(j, 2) - P2.at(i, 2);
                const double ddx = scale * (c * g0 - s * g1);
                const double ddy = scale * (s * g0 + c * g1);
                // heading of the query also rotates the frame
                const double dc = scale * dx * g0 + scale * dy * g1;
                const double ds_ = scale * dy * g0 - scale * dx * g1;
                const double dhq_frame = -s * dc + c * ds_;
                const double ddh = std::cos(dhead) * g2 - std::sin(dhead) * g3;
                if (wk) {
                    Matrix& gk = tp.node(ki).grad;
                    gk.at(j, 0) += ddx;
                    gk.at(j, 1) += ddy;
                    gk.at(j, 2) += ddh;
                }
                if (wp) {
                    Matrix& gp = tp.node(pi).grad;
                    gp.at(i, 0) -= ddx;
                    gp.at(i, 1) -= ddy;
                    gp.at(i, 2) += dhq_frame - ddh;
                }
            }
        }
    });
    return o;
}

// Per-slot features of an agent's state window [w, 5] (x, y, heading, vx, vy)
// relative to the window's last (anchor) state: local position, sin/cos of
// the heading offset, local velocity, validity flag. Output [1, 7w].
inline Value window_features(const Value& win, const std::vector<bool>& valid, double scale) {
    Tape& t = *win.tape;
    const Matrix& W = win.val();
    if (W.cols != 5) throw ContractError("window_features: window must be [w, 5]");
    const int w = W.rows;
    if (static_cast<int>(valid.size()) != w) throw ContractError("window_features: valid size");
    if (!valid[static_cast<std::size_t>(w - 1)]) {
        throw ContractError("window_features: anchor state must be valid");
    }
    const double ax = W.at(w - 1, 0), ay = W.at(w - 1, 1), ah = W.at(w - 1, 2);
    const double c = std::cos(ah), s = std::sin(ah);
    Matrix out(1, 7 * w);
    for (int k = 0; k < w; ++k) {
        if (!valid[static_cast<std::size_t>(k)]) continue;
        const double dx = W.at(k, 0) - ax;
        const double dy = W.at(k, 1) - ay;
        const double dh = W.at(k, 2) - ah;
        out.at(0, 7 * k + 0) = scale * (c * dx + s * dy);
        out.at(0, 7 * k + 1) = scale * (-s * dx + c * dy);
        out.at(0, 7 * k + 2) = std::sin(dh);
        out.at(0, 7 * k + 3) = std::cos(dh);
        out.at(0, 7 * k + 4) = scale * (c * W.at(k, 3) + s * W.at(k, 4));
        out.at(0, 7 * k + 5) = scale * (-s * W.at(k, 3) + c * W.at(k, 4));
        out.at(0, 7 * k + 6) = 1.0;
    }
    Value o = t.alloc(std::move(out), detail::wants(t, win.idx));
    t.set_backward(o, [wi = win.idx, oi = o.idx, valid, scale](Tape& tp) {
        const Matrix& g = tp.node(oi).grad;
        const Matrix& W2 = tp.node(wi).val;
        Matrix& gw = tp.node(wi).grad;
        const int w = W2.rows;
        const double ah = W2.at(w - 1, 2);
        const double c = std::cos(ah), s = std::sin(ah);
        for (int k = 0; k < w; ++k) {
            if (!valid[static_cast<std::size_t>(k)]) continue;
            const double g0 = g.at(0, 7 * k + 0), g1 = g.at(0, 7 * k + 1);
            const double g2 = g.at(0, 7 * k + 2), g3 = g.at(0, 7 * k + 3);
            const double g4 = g.at(0, 7 * k + 4), g5 = g.at(0, 7 * k + 5);
            const double dx = W2.at(k, 0) - W2.at(w - 1, 0);
            const double dy = W2.at(k, 1) - W2.at(w - 1, 1);
            const double dh = W2.at(k, 2) - ah;
            const double vx = W2.at(k, 3), vy = W2.at(k, 4);
            // positions
            const double ddx = scale * (c * g0 - s * g1);
            const double ddy = scale * (s * g0 + c * g1);
            gw.at(k, 0) += ddx;
            gw.at(k, 1) += ddy;
            gw.at(w - 1, 0) -= ddx;
            gw.at(w - 1, 1) -= ddy;
            // heading difference
            const double ddh = std::cos(dh) * g2 - std::sin(dh) * g3;
            gw.at(k, 2) += ddh;
            gw.at(w - 1, 2) -= ddh;
            // velocities
            gw.at(k, 3) += scale * (c * g4 - s * g5);
            gw.at(k, 4) += scale * (s * g4 + c * g5);
            // anchor heading rotates the frame of positions and velocities
            const double dc = scale * (dx * g0 + dy * g1 + vx * g4 + vy * g5);
            const double ds_ = scale * (dy * g0 - dx * g1 + vy * g4 - vx * g5);
            gw.at(w - 1, 2) += -s * dc + c * ds_;
        }
    });
    return o;
}

// Finite-difference kinematics along a predicted position sequence.
// prev: [1, 3] (x, y, heading) at the step before positions[0];
// positions: [k, 2]. Output [k, 5] rows (x, y, heading, vx, vy) where
// heading is atan2 of the step delta, carried over from the previous step
// when the step speed is below min_speed.
inline Value path_kinematics(const Value& prev, const Value& positions, double dt,
                             double min_speed) {
    detail::check_same_tape(prev, positions);
    Tape& t = *prev.tape;
    const Matrix& Pr = prev.val();
    const Matrix& P = positions.val();
    if (Pr.rows != 1 || Pr.cols != 3) throw ContractError("path_kinematics: prev is [1, 3]");
    if (P.cols != 2) throw ContractError("path_kinematics: positions are [k, 2]");
    const int k = P.rows;
    Matrix out(k, 5);
    std::vector<char> carried(static_cast<std::size_t>(k), 0);
    double prev_heading = Pr.at(0, 2);
    for (int i = 0; i < k; ++i) {
        const double px = i == 0 ? Pr.at(0, 0) : P.at(i - 1, 0);
        const double py = i == 0 ? Pr.at(0, 1) : P.at(i - 1, 1);
        const double dx = P.at(i, 0) - px;
        const double dy = P.at(i, 1) - py;
        double heading;
        if (std::hypot(dx, dy) / dt >= min_speed) {
            heading = std::atan2(dy, dx);
        } else {
            heading = prev_heading;
            carried[static_cast<std::size_t>(i)] = 1;
        }
        out.at(i, 0) = P.at(i, 0);
        out.at(i, 1) = P.at(i, 1);
        out.at(i, 2) = heading;
        out.at(i, 3) = dx / dt;
        out.at(i, 4) = dy / dt;
        prev_heading = heading;
    }
    const bool ng = detail::wants(t, prev.idx) || detail::wants(t, positions.idx);
    Value o = t.alloc(std::move(out), ng);
    t.set_backward(o, [pri = prev.idx, pi = positions.idx, oi = o.idx, dt,
                       carried = std::move(carried)](Tape& tp) {
        const Matrix& g = tp.node(oi).grad;
        const Matrix& Pr2 = tp.node(pri).val;
        const Matrix& P2 = tp.node(pi).val;
        const bool wprev = tp.node(pri).needs_grad;
        const bool wpos = tp.node(pi).needs_grad;
        const int k = P2.rows;
        // total heading gradient per step including carry chains
        std::vector<double> gh(static_cast<std::size_t>(k), 0.0);
        for (int i = k - 1; i >= 0; --i) {
            gh[static_cast<std::size_t>(i)] = g.at(i, 2);
            if (i + 1 < k && carried[static_cast<std::size_t>(i + 1)]) {
                gh[static_cast<std::size_t>(i)] += gh[static_cast<std::size_t>(i + 1)];
            }
        }
        for (int i = 0; i < k; ++i) {
            const double px = i == 0 ? Pr2.at(0, 0) : P2.at(i - 1, 0);
            const double py = i == 0 ? Pr2.at(0, 1) : P2.at(i - 1, 1);
            const double dx = P2.at(i, 0) - px;
            const double dy = P2.at(i, 1) - py;
            double ddx = g.at(i, 3) / dt;
            double ddy = g.at(i, 4) / dt;
            if (!carried[static_cast<std::size_t>(i)]) {
                const double denom = dx * dx + dy * dy;
                if (denom > 0.0) {
                    ddx += gh[static_cast<std::size_t>(i)] * (-dy / denom);
                    ddy += gh[static_cast<std::size_t>(i)] * (dx / denom);
                }
            } else if (i == 0 && wprev) {
                tp.node(pri).grad.at(0, 2) += gh[0];
            }
            if (wpos) {
                Matrix& gp = tp.node(pi).grad;
                gp.at(i, 0) += g.at(i, 0) + ddx;
                gp.at(i, 1) += g.at(i, 1) + ddy;
                if (i > 0) {
                    gp.at(i - 1, 0) -= ddx;
                    gp.at(i - 1, 1) -= ddy;
                }
            }
            if (i == 0 && wprev) {
                tp.node(pri).grad.at(0, 0) -= ddx;
                tp.node(pri).grad.at(0, 1) -= ddy;
            }
        }
    });
    return o;
}

// Local points into a frame: out_t = pos_t + R(heading_t) * delta_t.
// poses: [k, 3] or [1, 3] (broadcast); deltas: [k, 2].
inline Value local_to_frame(const Value& poses, const Value& deltas) {
    detail::check_same_tape(poses, deltas);
    Tape& t = *poses.tape;
    const Matrix& Po = poses.val();
    const Matrix& D = deltas.val();
    if (Po.cols != 3 || D.cols != 2) throw ContractError("local_to_frame: bad shapes");
    if (Po.rows != D.rows && Po.rows != 1) throw ContractError("local_to_frame: row mismatch");
    const int k = D.rows;
    Matrix out(k, 2);
    for (int i = 0; i < k; ++i) {
        const int p = Po.rows == 1 ? 0 : i;
        const double c = std::cos(Po.at(p, 2));
        const double s = std::sin(Po.at(p, 2));
        out.at(i, 0) = Po.at(p, 0) + c * D.at(i, 0) - s * D.at(i, 1);
        out.at(i, 1) = Po.at(p, 1) + s * D.at(i, 0) + c * D.at(i, 1);
    }
    const bool ng = detail::wants(t, poses.idx) || detail::wants(t, deltas.idx);
    Value o = t.alloc(std::move(out), ng);
    t.set_backward(o, [poi = poses.idx, di = deltas.idx, oi = o.idx](Tape& tp) {
        const Matrix& g = tp.node(oi).grad;
        const Matrix& Po2 = tp.node(poi).val;
        const Matrix& D2 = tp.node(di).val;
        const bool wpo = tp.node(poi).needs_grad;
        const bool wd = tp.node(di).needs_grad;
        for (int i = 0; i < D2.rows; ++i) {
            const int p = Po2.rows == 1 ? 0 : i;
            const double c = std::cos(Po2.at(p, 2));
            const double s = std::sin(Po2.at(p, 2));
            const double g0 = g.at(i, 0), g1 = g.at(i, 1);
            if (wd) {
                tp.node(di).grad.at(i, 0) += c * g0 + s * g1;
                tp.node(di).grad.at(i, 1) += -s * g0 + c * g1;
            }
            if (wpo) {
                Matrix& gp = tp.node(poi).grad;
                gp.at(p, 0) += g0;
                gp.at(p, 1) += g1;
                gp.at(p, 2) += g0 * (-s * D2.at(i, 0) - c * D2.at(i, 1)) +
                               g1 * (c * D2.at(i, 0) - s * D2.at(i, 1));
            }
        }
    });
    return o;
}

// World points into a frame's local coordinates: out_t = R(-h) (p_t - pos).
// poses: [k, 3] or [1, 3] (broadcast); points: [k, 2].
inline Value world_to_frame(const Value& poses, const Value& points) {
    detail::check_same_tape(poses, points);
    Tape& t = *poses.tape;
    const Matrix& Po = poses.val();
    const Matrix& P = points.val();
    if (Po.cols != 3 || P.cols != 2) throw ContractError("world_to_frame: bad shapes");
    if (Po.rows != P.rows && Po.rows != 1) throw ContractError("world_to_frame: row mismatch");
    const int k = P.rows;
    Matrix out(k, 2);
    for (int i = 0; i < k; ++i) {
        const int p = Po.rows == 1 ? 0 : i;
        const double c = std::cos(Po.at(p, 2));
        const double s = std::sin(Po.at(p, 2));
        const double dx = P.at(i, 0) - Po.at(p, 0);
        const double dy = P.at(i, 1) - Po.at(p, 1);
        out.at(i, 0) = c * dx + s * dy;
        out.at(i, 1) = -s * dx + c * dy;
    }
    const bool ng = detail::wants(t, poses.idx) || detail::wants(t, points.idx);
    Value o = t.alloc(std::move(out), ng);
    t.set_backward(o, [poi = poses.idx, pti = points.idx, oi = o.idx](Tape& tp) {
        const Matrix& g = tp.node(oi).grad;
        const Matrix& Po2 = tp.node(poi).val;
        const Matrix& P2 = tp.node(pti).val;
        const Matrix& Q = tp.node(oi).val;  // local coordinates, reused for d/dh
        const bool wpo = tp.node(poi).needs_grad;
        const bool wpt = tp.node(pti).needs_grad;
        for (int i = 0; i < P2.rows; ++i) {
            const int p = Po2.rows == 1 ? 0 : i;
            const double c = std::cos(Po2.at(p, 2));
            const double s = std::sin(Po2.at(p, 2));
            const double g0 = g.at(i, 0), g1 = g.at(i, 1);
            const double dwx = c * g0 - s * g1;
            const double dwy = s * g0 + c * g1;
            if (wpt) {
                tp.node(pti).grad.at(i, 0) += dwx;
                tp.node(pti).grad.at(i, 1) += dwy;
            }
            if (wpo) {
                Matrix& gp = tp.node(poi).grad;
                gp.at(p, 0) -= dwx;
                gp.at(p, 1) -= dwy;
                gp.at(p, 2) += g0 * Q.at(i, 1) - g1 * Q.at(i, 0);
            }
        }
    });
    return o;
}

// Summed full-covariance Gaussian NLL over a trajectory.
// mu: [k, 2]; sig: [k, 3] columns (log_s1, log_s2, alpha); target: [k, 2]
// constant; valid: per-step mask. Per step with variances
// v_i = sigma_min + exp(2 log_s_i) and residual rotated by -alpha:
//   L = sqrt(qx^2 / v1 + qy^2 / v2) + lambda * (log v1 + log v2).
inline Value gauss_nll_sum(const Value& mu, const Value& sig, const Value& target,
                           const std::vector<bool>& valid, double lambda_det,
                           double sigma_min) {
    detail::check_same_tape(mu, sig);
    detail::check_same_tape(mu, target);
    Tape& t = *mu.tape;
    const Matrix& M = mu.val();
    const Matrix& S = sig.val();
    const Matrix& Y = target.val();
    const int k = M.rows;
    if (M.cols != 2 || S.cols != 3 || S.rows != k || Y.rows != k || Y.cols != 2) {
        throw ContractError("gauss_nll_sum: bad shapes");
    }
    if (static_cast<int>(valid.size()) != k) throw ContractError("gauss_nll_sum: valid size");
    double total = 0.0;
    for (int i = 0; i < k; ++i) {
        if (!valid[static_cast<std::size_t>(i)]) continue;
        const double v1 = sigma_min + std::exp(2.0 * S.at(i, 0));
        const double v2 = sigma_min + std::exp(2.0 * S.at(i, 1));
        const double a = S.at(i, 2);
        const double ca = std::cos(a), sa = std::sin(a);
        const double rx = Y.at(i, 0) - M.at(i, 0);
        const double ry = Y.at(i, 1) - M.at(i, 1);
        const double qx = ca * rx + sa * ry;
        const double qy = -sa * rx + ca * ry;
        const double m2 = qx * qx / v1 + qy * qy / v2;
        total += std::sqrt(m2) + lambda_det * (std::log(v1) + std::log(v2));
    }
    const bool ng = detail::wants(t, mu.idx) || detail::wants(t, sig.idx) ||
                    detail::wants(t, target.idx);
    Value o = t.alloc(Matrix::scalar(total), ng);
    t.set_backward(o, [mi = mu.idx, si = sig.idx, ti = target.idx, oi = o.idx, valid,
                       lambda_det, sigma_min](Tape& tp) {
        const double g = tp.node(oi).grad.data[0];
        const Matrix& M2 = tp.node(mi).val;
        const Matrix& S2 = tp.node(si).val;
        const Matrix& Y2 = tp.node(ti).val;
        const bool wm = tp.node(mi).needs_grad;
        const bool ws = tp.node(si).needs_grad;
        const bool wt = tp.node(ti).needs_grad;
        for (int i = 0; i < M2.rows; ++i) {
            if (!valid[static_cast<std::size_t>(i)]) continue;
            const double e1 = std::exp(2.0 * S2.at(i, 0));
            const double e2 = std::exp(2.0 * S2.at(i, 1));
            const double v1 = sigma_min + e1;
            const double v2 = sigma_min + e2;
            const double a = S2.at(i, 2);
            const double ca = std::cos(a), sa = std::sin(a);
            const double rx = Y2.at(i, 0) - M2.at(i, 0);
            const double ry = Y2.at(i, 1) - M2.at(i, 1);
            const double qx = ca * rx + sa * ry;
            const double qy = -sa * rx + ca * ry;
            const double m = std::sqrt(qx * qx / v1 + qy * qy / v2);
            double dqx = 0.0, dqy = 0.0, dv1 = 0.0, dv2 = 0.0, dalpha = 0.0;
            if (m > 1e-12) {
                dqx = g * qx / (v1 * m);
                dqy = g * qy / (v2 * m);
                dv1 = -g * qx * qx / (2.0 * v1 * v1 * m);
                dv2 = -g * qy * qy / (2.0 * v2 * v2 * m);
                dalpha = g * qx * qy * (1.0 / v1 - 1.0 / v2) / m;
            }
            dv1 += g * lambda_det / v1;
            dv2 += g * lambda_det / v2;
            if (wm || wt) {
                const double drx = ca * dqx - sa * dqy;
                const double dry = sa * dqx + ca * dqy;
                if (wm) {
                    tp.node(mi).grad.at(i, 0) -= drx;
                    tp.node(mi).grad.at(i, 1) -= dry;
                }
                if (wt) {
                    tp.node(ti).grad.at(i, 0) += drx;
                    tp.node(ti).grad.at(i, 1) += dry;
                }
            }
            if (ws) {
                Matrix& gs = tp.node(si).grad;
                gs.at(i, 0) += dv1 * 2.0 * e1;
                gs.at(i, 1) += dv2 * 2.0 * e2;
                gs.at(i, 2) += dalpha;
            }
        }
    });
    return o;
}

// Adds a scalar column offset to one column (used to rotate covariance
// orientation angles between frames by adding the frame heading).
inline Value add_col_from(const Value& a, int col, const Value& src, int src_col) {
    detail::check_same_tape(a, src);
    Tape& t = *a.tape;
    const Matrix& A = a.val();
    const Matrix& S = src.val();
    if (S.rows != A.rows && S.rows != 1) throw ContractError("add_col_from: row mismatch");
    if (col < 0 || col >= A.cols || src_col < 0 || src_col >= S.cols) {
        throw ContractError("add_col_from: bad column");
    }
    Matrix out = A;
    for (int i = 0; i < A.rows; ++i) {
        out.at(i, col) += S.at(S.rows == 1 ? 0 : i, src_col);
    }
    const bool ng = detail::wants(t, a.idx) || detail::wants(t, src.idx);
    Value o = t.alloc(std::move(out), ng);
    t.set_backward(o, [ai = a.idx, si = src.idx, oi = o.idx, col, src_col](Tape& tp) {
        const Matrix& g = tp.node(oi).grad;
        if (tp.node(ai).needs_grad) detail::accumulate(tp.node(ai).grad, g);
        if (tp.node(si).needs_grad) {
            Matrix& gs = tp.node(si).grad;
            for (int i = 0; i < g.rows; ++i) {
                gs.at(gs.rows == 1 ? 0 : i, src_col) += g.at(i, col);
            }
        }
    });
    return o;
}

inline bool all_finite(const Value& v) {
    for (double x : v.val().data) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

}  // namespace clsim::ad
