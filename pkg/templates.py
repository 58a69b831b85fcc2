train_summary = """Training finished: {steps} steps in {elapsed:0.1f} seconds ({rate:0.2f} it/s)
Final loss: {final_loss:0.5f} smoothed: {smoothed:0.5f}
Checkpoint: {checkpoint}
{run_stats}"""

inpaint_summary = """Inpainted {frames} frames of {height}x{width} in {elapsed:0.1f} seconds
Plan: {plan}
Boundary check: {jumps}
Output: {out}
{run_stats}"""

eval_header = "{name:<24} {psnr:>9} {ssim:>8} {masked:>11}"
eval_row = "{name:<24} {psnr:>9.3f} {ssim:>8.4f} {masked:>11}"

gen_data_summary = """Generated {videos} video(s) of {height}x{width}x{frames} with {objects} object(s) in {out}"""

selftest_line = "[{status}] {name}: {detail}"
selftest_summary = """{passed}/{total} checks passed
{run_stats}"""

run_stats = """Memory: {resident:0.2f} MB
CPU: {cpu_time:0.2f} seconds
Warnings: {total_WARNING} Errors: {total_ERROR}"""


def format_run_stats() -> str:
    from psutil import Process
    from coloredformatter import stats
    process = Process()
    cpu = process.cpu_times()
    return run_stats.format(resident=process.memory_info().rss / 1024 ** 2, cpu_time=cpu.user + cpu.system, **stats)
