from argparse import Namespace
from logging import getLogger

from metrics import EvalReport, evaluate
from templates import eval_header, eval_row
from utils import parse_size
logger = getLogger(__name__)


def format_report(report: EvalReport) -> str:
    lines = [eval_header.format(name="video", psnr="PSNR", ssim="SSIM", masked="masked PSNR")]
    for v in report.videos:
        masked = f"{v.masked_psnr:.3f}" if v.masked_psnr is not None else "-"
        lines.append(eval_row.format(name=v.name, psnr=v.psnr, ssim=v.ssim, masked=masked))
    masked = f"{report.mean_masked_psnr:.3f}" if report.mean_masked_psnr is not None else "-"
    lines.append(eval_row.format(name="mean", psnr=report.mean_psnr, ssim=report.mean_ssim, masked=masked))
    return "\n".join(lines)


def run(args: Namespace) -> int:
    resize = parse_size(args.resize) if args.resize else None # width x height
    report = evaluate(args.pred, args.gt, resize=resize, mask_dir=args.mask, workers=args.workers)
    report.save_json(args.json)
    if args.xlsx:
        report.save_xlsx(args.xlsx)
    print(format_report(report))
    return 0


def setup(subparsers):
    parser = subparsers.add_parser("eval", help="PSNR / SSIM of predicted videos against ground truth")
    parser.add_argument("--pred", required=True)
    parser.add_argument("--gt", required=True)
    parser.add_argument("--json", required=True, help="report path")
    parser.add_argument("--resize", help="WxH both sets are resized to, e.g. 432x240")
    parser.add_argument("--mask", help="mask directory; adds PSNR over the holes")
    parser.add_argument("--xlsx", help="also write the report as an Excel workbook")
    parser.add_argument("--workers", type=int, default=1)
    parser.set_defaults(handler=run)
