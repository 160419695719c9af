/* Direct 3x3 convolution kernels for CHWN float32 activations.
 *
 * The batch axis sits innermost, so a weight tap touches a contiguous run
 * of wo*n floats.  The stride-1 forward keeps a 4-output-channel by
 * 32-float accumulator tile in vector registers across the whole ci*9
 * reduction and stores once, which is what lets it clear the im2col+GEMM
 * fallback on skinny channel counts.  Weight gradients are banked dot
 * products over the same rows.
 */
#include "convkernels.h"

#if defined(__GNUC__) || defined(__clang__)
#define SHIFTSCAN_VEC 1
typedef float vf __attribute__((vector_size(64), aligned(4)));
#define VL 16

static inline vf vload(const float *p) { return *(const vf *)p; }
static inline void vstore(float *p, vf v) { *(vf *)p = v; }
static inline vf vbcast(float s) { return ((vf){0}) + s; }
#endif

/* Scalar reference accumulation for row positions [q0, q1) of a block of
 * cb output channels; correctness path for tails and odd compilers. */
static void s1_scalar(const float *xp, const float *w, const float *b,
                      float *y, int ci, int co0, int cb, int ho,
                      long q0, long q1, int hp, int wp, int n, long rowlen,
                      long ystep) {
    long wstep = (long)ci * 9;
    for (int u = 0; u < cb; u++) {
        float *yr = y + (long)(co0 + u) * ystep + (long)ho * rowlen;
        const float *wu = w + (long)(co0 + u) * wstep;
        for (long q = q0; q < q1; q++) {
            float s = b[co0 + u];
            for (int c = 0; c < ci; c++) {
                const float *xb = xp + (((long)c * hp + ho) * wp) * n + q;
                const float *wc = wu + (long)c * 9;
                for (int i = 0; i < 3; i++)
                    for (int j = 0; j < 3; j++)
                        s += wc[i * 3 + j] * xb[((long)i * wp + j) * n];
            }
            yr[q] = s;
        }
    }
}

void conv3x3_s1(const float *xp, const float *w, const float *b, float *y,
                int ci, int co, int h, int wd, int n) {
    int hp = h + 2, wp = wd + 2;
    long rowlen = (long)wd * n;
    long ystep = (long)h * rowlen;
    long wstep = (long)ci * 9;
    int co0 = 0;
#ifdef SHIFTSCAN_VEC
    for (; co0 + 4 <= co; co0 += 4) {
        for (int ho = 0; ho < h; ho++) {
            long s0 = 0;
            for (; s0 + 2 * VL <= rowlen; s0 += 2 * VL) {
                vf a00 = vbcast(b[co0]), a01 = a00;
                vf a10 = vbcast(b[co0 + 1]), a11 = a10;
                vf a20 = vbcast(b[co0 + 2]), a21 = a20;
                vf a30 = vbcast(b[co0 + 3]), a31 = a30;
                for (int c = 0; c < ci; c++) {
                    const float *xb = xp + (((long)c * hp + ho) * wp) * n + s0;
                    const float *wb = w + ((long)co0 * ci + c) * 9;
                    for (int i = 0; i < 3; i++) {
                        const float *xr = xb + (long)i * wp * n;
                        for (int j = 0; j < 3; j++) {
                            vf x0 = vload(xr + (long)j * n);
                            vf x1 = vload(xr + (long)j * n + VL);
                            int t = i * 3 + j;
                            vf w0 = vbcast(wb[t]);
                            a00 += w0 * x0; a01 += w0 * x1;
                            vf w1 = vbcast(wb[t + wstep]);
                            a10 += w1 * x0; a11 += w1 * x1;
                            vf w2 = vbcast(wb[t + 2 * wstep]);
                            a20 += w2 * x0; a21 += w2 * x1;
                            vf w3 = vbcast(wb[t + 3 * wstep]);
                            a30 += w3 * x0; a31 += w3 * x1;
                        }
                    }
                }
                float *yb = y + (long)co0 * ystep + (long)ho * rowlen + s0;
                vstore(yb, a00); vstore(yb + VL, a01);
                vstore(yb + ystep, a10); vstore(yb + ystep + VL, a11);
                vstore(yb + 2 * ystep, a20); vstore(yb + 2 * ystep + VL, a21);
                vstore(yb + 3 * ystep, a30); vstore(yb + 3 * ystep + VL, a31);
            }
            if (s0 < rowlen)
                s1_scalar(xp, w, b, y, ci, co0, 4, ho, s0, rowlen,
                          hp, wp, n, rowlen, ystep);
        }
    }
#endif
    if (co0 < co)
        for (int ho = 0; ho < h; ho++)
            s1_scalar(xp, w, b, y, ci, co0, co - co0, ho, 0, rowlen,
                      hp, wp, n, rowlen, ystep);
}

/* Scalar accumulation for stride-2 output pixel (r, q), batch lanes
 * [e0, n), for a block of cb output channels. */
static void s2_scalar(const float *xp, const float *w, const float *b,
                      float *y, int ci, int co0, int cb, int r, int q,
                      int e0, int hp, int wp, int n, long rowlen, long ystep) {
    long wstep = (long)ci * 9;
    for (int u = 0; u < cb; u++) {
        float *yp = y + (long)(co0 + u) * ystep + (long)r * rowlen + (long)q * n;
        const float *wu = w + (long)(co0 + u) * wstep;
        for (int e = e0; e < n; e++) {
            float s = b[co0 + u];
            for (int c = 0; c < ci; c++) {
                const float *xb =
                    xp + (((long)c * hp + 2 * r) * wp + 2 * q) * n + e;
                const float *wc = wu + (long)c * 9;
                for (int i = 0; i < 3; i++)
                    for (int j = 0; j < 3; j++)
                        s += wc[i * 3 + j] * xb[((long)i * wp + j) * n];
            }
            yp[e] = s;
        }
    }
}

void conv3x3_s2(const float *xp, const float *w, const float *b, float *y,
                int ci, int co, int h, int wd, int n, int ho, int wo) {
    int hp = h + 2, wp = wd + 2;
    long rowlen = (long)wo * n;
    long ystep = (long)ho * rowlen;
    long wstep = (long)ci * 9;
    int co0 = 0;
    (void)h;
#ifdef SHIFTSCAN_VEC
    for (; co0 + 4 <= co; co0 += 4) {
        for (int r = 0; r < ho; r++) {
            for (int q = 0; q < wo; q++) {
                int e0 = 0;
                for (; e0 + 2 * VL <= n; e0 += 2 * VL) {
                    vf a00 = vbcast(b[co0]), a01 = a00;
                    vf a10 = vbcast(b[co0 + 1]), a11 = a10;
                    vf a20 = vbcast(b[co0 + 2]), a21 = a20;
                    vf a30 = vbcast(b[co0 + 3]), a31 = a30;
                    for (int c = 0; c < ci; c++) {
                        const float *xb =
                            xp + (((long)c * hp + 2 * r) * wp + 2 * q) * n + e0;
                        const float *wb = w + ((long)co0 * ci + c) * 9;
                        for (int i = 0; i < 3; i++) {
                            const float *xr = xb + (long)i * wp * n;
                            for (int j = 0; j < 3; j++) {
                                vf x0 = vload(xr + (long)j * n);
                                vf x1 = vload(xr + (long)j * n + VL);
                                int t = i * 3 + j;
                                vf w0 = vbcast(wb[t]);
                                a00 += w0 * x0; a01 += w0 * x1;
                                vf w1 = vbcast(wb[t + wstep]);
                                a10 += w1 * x0; a11 += w1 * x1;
                                vf w2 = vbcast(wb[t + 2 * wstep]);
                                a20 += w2 * x0; a21 += w2 * x1;
                                vf w3 = vbcast(wb[t + 3 * wstep]);
                                a30 += w3 * x0; a31 += w3 * x1;
                            }
                        }
                    }
                    float *yb = y + (long)co0 * ystep + (long)r * rowlen
                                + (long)q * n + e0;
                    vstore(yb, a00); vstore(yb + VL, a01);
                    vstore(yb + ystep, a10); vstore(yb + ystep + VL, a11);
                    vstore(yb + 2 * ystep, a20); vstore(yb + 2 * ystep + VL, a21);
                    vstore(yb + 3 * ystep, a30); vstore(yb + 3 * ystep + VL, a31);
                }
                if (e0 < n)
                    s2_scalar(xp, w, b, y, ci, co0, 4, r, q, e0,
                              hp, wp, n, rowlen, ystep);
            }
        }
    }
#endif
    if (co0 < co)
        for (int r = 0; r < ho; r++)
            for (int q = 0; q < wo; q++)
                s2_scalar(xp, w, b, y, ci, co0, co - co0, r, q, 0,
                          hp, wp, n, rowlen, ystep);
}

/* Banked dot product: independent register accumulators summed after the
 * main loop, so the reduction vectorizes without -ffast-math. */
#ifdef SHIFTSCAN_VEC
static float dot_row(const float *a, const float *b, long len) {
    vf s0 = {0}, s1 = {0}, s2 = {0}, s3 = {0};
    long q = 0;
    for (; q + 4 * VL <= len; q += 4 * VL) {
        s0 += vload(a + q) * vload(b + q);
        s1 += vload(a + q + VL) * vload(b + q + VL);
        s2 += vload(a + q + 2 * VL) * vload(b + q + 2 * VL);
        s3 += vload(a + q + 3 * VL) * vload(b + q + 3 * VL);
    }
    for (; q + VL <= len; q += VL)
        s0 += vload(a + q) * vload(b + q);
    s0 += s1 + s2 + s3;
    float s = 0;
    for (int l = 0; l < VL; l++) s += s0[l];
    for (; q < len; q++) s += a[q] * b[q];
    return s;
}
#else
static float dot_row(const float *restrict a, const float *restrict b, long len) {
    float acc[16] = {0};
    long q = 0;
    for (; q + 16 <= len; q += 16)
        for (int l = 0; l < 16; l++) acc[l] += a[q + l] * b[q + l];
    float s = 0;
    for (int l = 0; l < 16; l++) s += acc[l];
    for (; q < len; q++) s += a[q] * b[q];
    return s;
}
#endif

void conv3x3_dw_s1(const float *xp, const float *gy, float *gw,
                   int ci, int co, int h, int wd, int n) {
    int hp = h + 2, wp = wd + 2;
    long rowlen = (long)wd * n;
    for (int o = 0; o < co; o++) {
        for (int c = 0; c < ci; c++) {
            float acc[9] = {0};
            for (int r = 0; r < h; r++) {
                const float *gyr = gy + ((long)o * h + r) * rowlen;
                for (int i = 0; i < 3; i++) {
                    const float *xr = xp + (((long)c * hp + r + i) * wp) * n;
                    for (int j = 0; j < 3; j++)
                        acc[i * 3 + j] += dot_row(gyr, xr + (long)j * n, rowlen);
                }
            }
            float *g = gw + ((long)o * ci + c) * 9;
            for (int t = 0; t < 9; t++) g[t] = acc[t];
        }
    }
}

void conv3x3_dw_s2(const float *xp, const float *gy, float *gw,
                   int ci, int co, int h, int wd, int n, int ho, int wo) {
    int hp = h + 2, wp = wd + 2;
    long rowlen = (long)wo * n;
    (void)h;
    for (int o = 0; o < co; o++) {
        for (int c = 0; c < ci; c++) {
            float acc[9] = {0};
#ifdef SHIFTSCAN_VEC
            for (int i = 0; i < 3; i++) {
                for (int j = 0; j < 3; j++) {
                    vf v0 = {0}, v1 = {0}, v2 = {0}, v3 = {0};
                    float tail = 0;
                    for (int r = 0; r < ho; r++) {
                        const float *gyr = gy + ((long)o * ho + r) * rowlen;
                        const float *xr =
                            xp + (((long)c * hp + 2 * r + i) * wp) * n;
                        for (int q = 0; q < wo; q++) {
                            const float *ga = gyr + (long)q * n;
                            const float *xa = xr + (long)(2 * q + j) * n;
                            int e = 0;
                            for (; e + 4 * VL <= n; e += 4 * VL) {
                                v0 += vload(ga + e) * vload(xa + e);
                                v1 += vload(ga + e + VL) * vload(xa + e + VL);
                                v2 += vload(ga + e + 2 * VL) * vload(xa + e + 2 * VL);
                                v3 += vload(ga + e + 3 * VL) * vload(xa + e + 3 * VL);
                            }
                            for (; e + VL <= n; e += VL)
                                v0 += vload(ga + e) * vload(xa + e);
                            for (; e < n; e++) tail += ga[e] * xa[e];
                        }
                    }
                    v0 += v1 + v2 + v3;
                    float s = tail;
                    for (int l = 0; l < VL; l++) s += v0[l];
                    acc[i * 3 + j] = s;
                }
            }
#else
            for (int r = 0; r < ho; r++) {
                const float *gyr = gy + ((long)o * ho + r) * rowlen;
                for (int i = 0; i < 3; i++) {
                    const float *xr = xp + (((long)c * hp + 2 * r + i) * wp) * n;
                    for (int j = 0; j < 3; j++) {
                        float s = 0;
                        for (int q = 0; q < wo; q++)
                            s += dot_row(gyr + (long)q * n,
                                         xr + (long)(2 * q + j) * n, n);
                        acc[i * 3 + j] += s;
                    }
                }
            }
#endif
            float *g = gw + ((long)o * ci + c) * 9;
            for (int t = 0; t < 9; t++) g[t] = acc[t];
        }
    }
}
