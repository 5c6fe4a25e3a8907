# Loss trace columns
STEP_KEY = "step"
TOTAL_KEY = "total"
CC_KEY = "cc"
SMOOTH_KEY = "smooth"
LOSS_TRACE_COLUMNS = [STEP_KEY, TOTAL_KEY, CC_KEY, SMOOTH_KEY]

# Report columns
PAIR_KEY = "pair"
LABEL_KEY = "label"
DICE_KEY = "dice"
BASELINE_DICE_KEY = "baseline_dice"
REPORT_COLUMNS = [LABEL_KEY, DICE_KEY, BASELINE_DICE_KEY]

# Persistence
CHECKPOINT_FORMAT_VERSION = "tunetreg-checkpoint-2"
CHECKPOINT_FILENAME = "checkpoint.dill"
LOSS_TRACE_FILENAME = "loss_trace.csv"
RUN_CONFIG_FILENAME = "run_config.json"
MANIFEST_FILENAME = "manifest.json"
REPORT_CSV_FILENAME = "dice.csv"
REPORT_FIGURE_FILENAME = "dice.png"
REPORT_FOOTER_FILENAME = "footer.txt"
SLICES_FILENAME = "slices.png"
BASELINE_FILENAME = "baseline_dice.csv"
GRADCHECK_FILENAME = "gradcheck.csv"
WARPED_FILENAME = "warped.nii"
WARPED_SEG_FILENAME = "warped_seg.nii"
DATA_ROOT_ENV = "TUNETREG_DATA_ROOT"

# Synthetic pair files
MOVING_FILENAME = "moving.nii"
FIXED_FILENAME = "fixed.nii"
MOVING_SEG_FILENAME = "moving_seg.nii"
FIXED_SEG_FILENAME = "fixed_seg.nii"
FIELD_FILENAME = "field.nii"

# CLI exit codes
EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_INVALID_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4

# Dice values on LPBA40 (Brain stem, Parietal, Hippocampus, Putamen).
# Reference context only, these are not reproduced by this package.
REFERENCE_STRUCTURES = ["Brain stem", "Parietal", "Hippocampus", "Putamen"]
REFERENCE_DICE_TABLE = {
    "SyN": [0.772, 0.501, 0.506, 0.501],
    "VM": [0.781, 0.554, 0.518, 0.544],
    "VTN": [0.791, 0.582, 0.516, 0.547],
    "CM": [0.787, 0.565, 0.519, 0.558],
    "TUNet": [0.798, 0.606, 0.547, 0.574],
}
