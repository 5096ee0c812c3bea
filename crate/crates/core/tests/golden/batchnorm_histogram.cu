__global__ void fused_batchnorm_histogram(int* bn_in, int* bn_out, int* bn_mean, int* bn_var, int* hg_in, int* hg_out) {
    int global_tid;
    int tid_1;
    int tid_2;
    int size_1;
    int size_2;
    int threadIdx_x;
    int threadIdx_y;
    int threadIdx_z;
    int blockDim_x;
    int blockDim_y;
    int blockDim_z;
    __shared__ int k1_bn_sum[32];
    __shared__ int k1_bn_sq[32];
    __shared__ int k1_bn_stat[2];
    int k1_tid;
    int k1_nt;
    int k1_base;
    int k1_s;
    int k1_q;
    int k1_i;
    int k1_v;
    __shared__ int k2_hg_local[64];
    int k2_t;
    int k2_nt;
    int k2_i;
    int k2_get_bin_v;
    int k2_get_bin_nbins;
    int k2_get_bin_ret;
    global_tid = threadIdx.x + threadIdx.y * blockDim.x + threadIdx.z * blockDim.x * blockDim.y;
    tid_1 = global_tid;
    tid_2 = global_tid - 896;
    size_1 = 896;
    size_2 = 128;
    if (global_tid < 896) {
        blockDim_x = 56;
        blockDim_y = 16;
        blockDim_z = 1;
        threadIdx_x = global_tid % 56;
        threadIdx_y = global_tid / 56 % 16;
        threadIdx_z = 0;
    } else {
        blockDim_x = 128;
        blockDim_y = 1;
        blockDim_z = 1;
        threadIdx_x = global_tid - 896;
        threadIdx_y = 0;
        threadIdx_z = 0;
    }
    if (!(global_tid < 896)) goto K1_end;
    k1_tid = threadIdx_x + threadIdx_y * blockDim_x;
    k1_nt = blockDim_x * blockDim_y;
    k1_base = blockIdx.x * 1024;
    k1_s = 0;
    k1_q = 0;
    for (k1_i = k1_tid; k1_i < 1024; k1_i = k1_i + k1_nt) {
        k1_v = bn_in[k1_base + k1_i];
        k1_s = k1_s + k1_v;
        k1_q = k1_q + k1_v * k1_v;
    }
    k1_s = k1_s + __shfl_xor_sync(0xffffffff, k1_s, 1);
    k1_q = k1_q + __shfl_xor_sync(0xffffffff, k1_q, 1);
    k1_s = k1_s + __shfl_xor_sync(0xffffffff, k1_s, 2);
    k1_q = k1_q + __shfl_xor_sync(0xffffffff, k1_q, 2);
    k1_s = k1_s + __shfl_xor_sync(0xffffffff, k1_s, 4);
    k1_q = k1_q + __shfl_xor_sync(0xffffffff, k1_q, 4);
    k1_s = k1_s + __shfl_xor_sync(0xffffffff, k1_s, 8);
    k1_q = k1_q + __shfl_xor_sync(0xffffffff, k1_q, 8);
    k1_s = k1_s + __shfl_xor_sync(0xffffffff, k1_s, 16);
    k1_q = k1_q + __shfl_xor_sync(0xffffffff, k1_q, 16);
    if (k1_tid % 32 == 0) {
        k1_bn_sum[k1_tid / 32] = k1_s;
        k1_bn_sq[k1_tid / 32] = k1_q;
    }
    asm("bar.sync 1, 896;");
    if (k1_tid < 32) {
        k1_s = 0;
        k1_q = 0;
        if (k1_tid < k1_nt / 32) {
            k1_s = k1_bn_sum[k1_tid];
            k1_q = k1_bn_sq[k1_tid];
        }
        k1_s = k1_s + __shfl_xor_sync(0xffffffff, k1_s, 1);
        k1_q = k1_q + __shfl_xor_sync(0xffffffff, k1_q, 1);
        k1_s = k1_s + __shfl_xor_sync(0xffffffff, k1_s, 2);
        k1_q = k1_q + __shfl_xor_sync(0xffffffff, k1_q, 2);
        k1_s = k1_s + __shfl_xor_sync(0xffffffff, k1_s, 4);
        k1_q = k1_q + __shfl_xor_sync(0xffffffff, k1_q, 4);
        k1_s = k1_s + __shfl_xor_sync(0xffffffff, k1_s, 8);
        k1_q = k1_q + __shfl_xor_sync(0xffffffff, k1_q, 8);
        k1_s = k1_s + __shfl_xor_sync(0xffffffff, k1_s, 16);
        k1_q = k1_q + __shfl_xor_sync(0xffffffff, k1_q, 16);
        if (k1_tid == 0) {
            k1_bn_stat[0] = k1_s / 1024;
            k1_bn_stat[1] = k1_q / 1024 - k1_s / 1024 * (k1_s / 1024);
            bn_mean[blockIdx.x] = k1_bn_stat[0];
            bn_var[blockIdx.x] = k1_bn_stat[1];
        }
    }
    asm("bar.sync 1, 896;");
    for (k1_i = k1_tid; k1_i < 1024; k1_i = k1_i + k1_nt) {
        bn_out[k1_base + k1_i] = bn_in[k1_base + k1_i] - k1_bn_stat[0];
    }
K1_end:
    if (global_tid < 896) goto K2_end;
    k2_t = threadIdx_x + threadIdx_y * blockDim_x + threadIdx_z * blockDim_x * blockDim_y;
    k2_nt = blockDim_x * blockDim_y * blockDim_z;
    for (k2_i = k2_t; k2_i < 64; k2_i = k2_i + k2_nt) {
        k2_hg_local[k2_i] = 0;
    }
    asm("bar.sync 2, 128;");
    for (k2_i = blockIdx.x * k2_nt + k2_t; k2_i < 8192; k2_i = k2_i + k2_nt * gridDim.x) {
        k2_get_bin_v = hg_in[k2_i];
        k2_get_bin_nbins = 64;
        k2_get_bin_ret = k2_get_bin_v % k2_get_bin_nbins;
        atomicAdd(&k2_hg_local[k2_get_bin_ret], 1);
    }
    asm("bar.sync 2, 128;");
    for (k2_i = k2_t; k2_i < 64; k2_i = k2_i + k2_nt) {
        atomicAdd(&hg_out[k2_i], k2_hg_local[k2_i]);
    }
K2_end:
}
