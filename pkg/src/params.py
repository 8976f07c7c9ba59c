"""
Pathway Parameters
"""

checkpoint_folder = "checkpoints"
results_folder = "results"
plots_folder = "plots"
logs_folder = "logs"

manifest_file = "manifest.toml"
config_copy_file = "config.txt"

"""
Checkpoint Names
"""
segnet_checkpoint = "segnet"
semantic_codec_checkpoint = "semantic_codec"
channel_codec_checkpoint = "channel_codec"
channel_codec_stage_checkpoint = "channel_codec_stage{stage}"
evaluator_checkpoint = "evaluator"

"""
Result File Names
"""
transmission_file = "transmission.csv"
sweep_file = "sweep.csv"
eval_samples_file = "eval_samples.csv"
stacking_ablation_file = "stacking_ablation.csv"
selection_ablation_file = "selection_ablation.csv"
sme_ablation_file = "sme_ablation.csv"
psnr_plot_file = "psnr_vs_snr.png"
ssim_plot_file = "ssim_vs_snr.png"
stacking_plot_file = "stacking_ablation.png"

metrics_columns = [
    "run_id",
    "snr_db",
    "depth",
    "tier",
    "psnr_db",
    "task_psnr_db",
    "ssim",
    "payload_bytes",
]
eval_sample_columns = ["x_s", "x_c", "y"]

"""
Channel Defaults
"""
default_b0 = 0.158
default_m = 19.4
default_omega = 1.29
default_snr_db_min = -10.0
default_snr_db_max = 10.0
default_gamma1_db = 3.0
default_gamma2_db = -3.0

hyp1f1_rel_tol = 1e-14
hyp1f1_max_terms = 10000

"""
Network Defaults
"""
segnet_widths = [64, 128, 256]
patch_size = 4
window_size = 4
embed_dim = 128
stage_depths = [2, 4]
stage_heads = [4, 8]
latent_channels = 96
mlp_ratio = 4.0
channel_tier_widths = [64, 128, 256]

"""
Training Defaults
"""
learning_rate = 0.0001
batch_size = 8
weight_decay = 0.01

"""
Selection and Metric Values
"""
sme_threshold = 7
task_only_kernel = 0
default_blur_thresholds = [-1e9, 12.0, 16.0, 20.0, 24.0]
default_blur_kernels = [task_only_kernel, 15, 9, 5, 1]
png_compress_level = 9
compressor_identity = f"PNG (Pillow, zlib level {png_compress_level})"
payload_header_slack = 64

pixel_max = 255.0
ssim_k1 = 0.01
ssim_k2 = 0.03
ssim_window = 8
