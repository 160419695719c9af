#ifndef SHIFTSCAN_CONVKERNELS_H
#define SHIFTSCAN_CONVKERNELS_H

/* 3x3 convolution kernels over CHWN (channel, row, col, batch) float32
 * activations.  Inputs arrive zero-padded by one pixel on each border:
 * xp has shape [ci, h+2, w+2, n], outputs y have shape [co, ho, wo, n].
 * Weights are [co, ci, 3, 3], bias is [co]. */

void conv3x3_s1(const float *xp, const float *w, const float *b, float *y,
                int ci, int co, int h, int wd, int n);

void conv3x3_s2(const float *xp, const float *w, const float *b, float *y,
                int ci, int co, int h, int wd, int n, int ho, int wo);

void conv3x3_dw_s1(const float *xp, const float *gy, float *gw,
                   int ci, int co, int h, int wd, int n);

void conv3x3_dw_s2(const float *xp, const float *gy, float *gw,
                   int ci, int co, int h, int wd, int n, int ho, int wo);

#endif
