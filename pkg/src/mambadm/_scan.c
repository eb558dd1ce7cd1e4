/*
 * Fused selective scan (exact diagonal ZOH + recurrence + readout) and its
 * gradient. Called through ctypes from mambadm.kernels; the Python module
 * object only exists so setuptools builds and installs the shared library.
 *
 * Layout (row-major; float32 or float64 throughout, one entry point each):
 *   u, delta, y : (nb, nt, ne)     A : (ne, nn)
 *   Bm, Cm      : (nb, nt, nn)     h0, h_last grads : (nb, ne, nn)
 *   hs          : (nb, nt, nn, ne) latent states saved by the forward pass
 *
 * h0, gh_last and gh0 may be NULL: a zero initial state, no gradient on the
 * final state, and no initial-state gradient wanted.
 *
 * Internally the state index is the outer loop and channels the inner one, so
 * the vectorised loops run over contiguous channels and B, C are broadcasts.
 */
#define PY_SSIZE_T_CLEAN
#include <Python.h>
#include <math.h>
#include <stddef.h>
#include <stdlib.h>
#include <string.h>

#define TINY_A 1e-12

/*
 * B_bar/B = (A_bar - 1)/A and its derivative in A. A series is used when
 * |dt*A| < SMALL, which also covers |A| < TINY_A (the dt*B limit) for any
 * realistic step. SMALL is larger in single precision, where the exact form
 * loses about eps/|dt*A| to cancellation. Branch-free so the loops vectorise.
 */
#define DEFINE_ZOH(SFX, T, ABS, SMALL)                                                          \
    static inline void zoh_##SFX(T dt, T a, T inv_a, T abar, T *r, T *drda)                     \
    {                                                                                           \
        T x = dt * a;                                                                           \
        int small = ABS(x) < (T)(SMALL);                                                        \
        T r_series = dt * (1 + x * ((T)0.5 + x * ((T)(1.0 / 6) + x * ((T)(1.0 / 24) +           \
                                                                         x * (T)(1.0 / 120))))); \
        T d_series = dt * dt * ((T)0.5 + x * ((T)(1.0 / 3) + x * ((T)0.125 +                    \
                                                                  x * ((T)(1.0 / 30) + x * (T)(1.0 / 144))))); \
        T r_exact = (abar - 1) * inv_a;                                                         \
        T d_exact = (dt * abar - r_exact) * inv_a;                                              \
        *r = small ? r_series : r_exact;                                                        \
        *drda = small ? d_series : d_exact;                                                     \
    }

DEFINE_ZOH(f32, float, fabsf, 1e-1)
DEFINE_ZOH(f64, double, fabs, 1e-3)

/* (rows, cols) -> (cols, rows) with type conversion on the way in or out */
#define DEFINE_HELPERS(SFX, T)                                                        \
    static void transpose_in_##SFX(const T *src, T *dst, int rows, int cols)     \
    {                                                                                 \
        for (int i = 0; i < rows; i++)                                                \
            for (int j = 0; j < cols; j++)                                            \
                dst[(size_t)j * rows + i] = src[(size_t)i * cols + j];        \
    }                                                                                 \
    static void transpose_out_##SFX(const T *src, T *dst, int rows, int cols)    \
    {                                                                                 \
        for (int i = 0; i < rows; i++)                                                \
            for (int j = 0; j < cols; j++)                                            \
                dst[(size_t)j * rows + i] = src[(size_t)i * cols + j];             \
    }                                                                                 \
    /* A and 1/A in (nn, ne) order followed by `extra` zeroed ne*nn blocks */         \
    static T *alloc_work_##SFX(const T *A, int ne, int nn, int extra)            \
    {                                                                                 \
        size_t en = (size_t)ne * nn;                                                  \
        T *w = calloc((2 + extra) * en, sizeof(T));                         \
        if (w == NULL)                                                                \
            return NULL;                                                              \
        transpose_in_##SFX(A, w, ne, nn);                                             \
        for (size_t k = 0; k < en; k++)                                               \
            w[en + k] = fabs((double)w[k]) < TINY_A ? 1 : 1 / w[k];                       \
        return w;                                                                     \
    }

DEFINE_HELPERS(f32, float)
DEFINE_HELPERS(f64, double)

#define DEFINE_SCAN(SFX, T, EXP) \
int mambadm_scan_forward_##SFX(int nb, int nt, int ne, int nn, \
                         const T *u, const T *delta, const T *A, \
                         const T *Bm, const T *Cm, const T *h0, \
                         T *y, T *hs) \
{ \
    size_t en = (size_t)ne * nn; \
    T *work = alloc_work_##SFX(A, ne, nn, 2); \
    if (work == NULL) \
        return -1; \
    const T *At = work, *It = work + en; \
    T *h0t = work + 2 * en, *yacc = work + 3 * en; \
    for (int b = 0; b < nb; b++) { \
        if (h0 != NULL) \
            transpose_in_##SFX(h0 + (size_t)b * en, h0t, ne, nn); \
        const T *hp = h0t; \
        for (int t = 0; t < nt; t++) { \
            size_t bt = (size_t)b * nt + t; \
            const T *dl = delta + bt * ne; \
            const T *ul = u + bt * ne; \
            const T *B = Bm + bt * nn; \
            const T *C = Cm + bt * nn; \
            T *H = hs + bt * en; \
            T *yt = y + bt * ne; \
            for (int e = 0; e < ne; e++) \
                yacc[e] = 0.0; \
            for (int n = 0; n < nn; n++) { \
                size_t o = (size_t)n * ne; \
                T bn = B[n], cn = C[n]; \
_Pragma("omp simd") \
                for (int e = 0; e < ne; e++) { \
                    T r, drda, dt = dl[e], a = At[o + e]; \
                    T abar = EXP(dt * a); \
                    zoh_##SFX(dt, a, It[o + e], abar, &r, &drda); \
                    T hn = abar * hp[o + e] + r * bn * ul[e]; \
                    H[o + e] = hn; \
                    yacc[e] += cn * hn; \
                } \
            } \
            for (int e = 0; e < ne; e++) \
                yt[e] = yacc[e]; \
            hp = H; \
        } \
    } \
    free(work); \
    return 0; \
} \
 \
int mambadm_scan_backward_##SFX(int nb, int nt, int ne, int nn, \
                          const T *u, const T *delta, const T *A, \
                          const T *Bm, const T *Cm, const T *h0, \
                          const T *hs, const T *gy, const T *gh_last, \
                          T *gu, T *gdelta, T *gA, T *gB, \
                          T *gC, T *gh0) \
{ \
    size_t en = (size_t)ne * nn; \
    T *work = alloc_work_##SFX(A, ne, nn, 5); \
    if (work == NULL) \
        return -1; \
    const T *At = work, *It = work + en; \
    T *h0t = work + 2 * en, *g = work + 3 * en, *gAt = work + 4 * en; \
    T *gua = work + 5 * en, *gda = work + 6 * en; \
    for (int b = 0; b < nb; b++) { \
        if (h0 != NULL) \
            transpose_in_##SFX(h0 + (size_t)b * en, h0t, ne, nn); \
        if (gh_last != NULL) \
            transpose_in_##SFX(gh_last + (size_t)b * en, g, ne, nn); \
        else \
            memset(g, 0, en * sizeof(T)); \
        for (int t = nt - 1; t >= 0; t--) { \
            size_t bt = (size_t)b * nt + t; \
            const T *dl = delta + bt * ne; \
            const T *ul = u + bt * ne; \
            const T *gyt = gy + bt * ne; \
            const T *B = Bm + bt * nn; \
            const T *C = Cm + bt * nn; \
            const T *H = hs + bt * en; \
            const T *Hp = t > 0 ? hs + (bt - 1) * en : h0t; \
            T *gut = gu + bt * ne; \
            T *gdt = gdelta + bt * ne; \
            for (int e = 0; e < ne; e++) \
                gua[e] = gda[e] = 0.0; \
            for (int n = 0; n < nn; n++) { \
                size_t o = (size_t)n * ne; \
                T bn = B[n], cn = C[n], gb_acc = 0.0, gc_acc = 0.0; \
_Pragma("omp simd reduction(+ : gb_acc, gc_acc)") \
                for (int e = 0; e < ne; e++) { \
                    T r, drda, dt = dl[e], a = At[o + e], ut = ul[e]; \
                    T abar = EXP(dt * a); \
                    zoh_##SFX(dt, a, It[o + e], abar, &r, &drda); \
                    gc_acc += gyt[e] * H[o + e]; \
                    T gn = g[o + e] + cn * gyt[e]; \
                    T g_abar = gn * Hp[o + e]; \
                    T g_r = gn * bn * ut; \
                    gb_acc += gn * r * ut; \
                    gua[e] += gn * r * bn; \
                    gda[e] += (g_abar * a + g_r) * abar; \
                    gAt[o + e] += g_abar * dt * abar + g_r * drda; \
                    g[o + e] = gn * abar; \
                } \
                gB[bt * nn + n] = gb_acc; \
                gC[bt * nn + n] = gc_acc; \
            } \
            for (int e = 0; e < ne; e++) { \
                gut[e] = gua[e]; \
                gdt[e] = gda[e]; \
            } \
        } \
        if (gh0 != NULL) \
            transpose_out_##SFX(g, gh0 + (size_t)b * en, nn, ne); \
    } \
    transpose_out_##SFX(gAt, gA, nn, ne); \
    free(work); \
    return 0; \
}

DEFINE_SCAN(f32, float, expf)
DEFINE_SCAN(f64, double, exp)

static struct PyModuleDef scan_module = {
    PyModuleDef_HEAD_INIT, "_scan", "Fused selective-scan kernels (ctypes entry points).", -1, NULL,
};

PyMODINIT_FUNC PyInit__scan(void)
{
    return PyModule_Create(&scan_module);
}
