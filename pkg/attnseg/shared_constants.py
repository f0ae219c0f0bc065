SUBTYPE_NAMES = (
    'ivh',  # intraventricular
    'iph',  # intraparenchymal
    'sah',  # subarachnoid
    'edh',  # epidural
    'sdh',  # subdural
)

# Column order of the wide label table; multi-label logits follow the same order
LABEL_COLUMNS = ('any',) + SUBTYPE_NAMES

# (center, width) in HU, stacked in this channel order
DEFAULT_WINDOWS = {
    'brain': (40.0, 80.0),
    'subdural': (80.0, 200.0),
    'bone': (600.0, 2800.0),
}
WINDOW_ORDER = ('brain', 'subdural', 'bone')

# Brain mask soft-tissue range and air cut-off
BRAIN_HU_RANGE = (0.0, 100.0)
AIR_HU_CUTOFF = -500.0

METHOD_TAGS = {
    'grad-cam': 'Swin-Grad-CAM',
    'sam-multilabel': 'Swin-SAM Multi-label',
    'sam-binary': 'Swin-SAM Binary',
    'hgi-sam': 'Swin-HGI-SAM',
    'unet': 'Fully supervised UNet',
}
# Report column order
METHOD_ORDER = ('grad-cam', 'sam-multilabel', 'sam-binary', 'hgi-sam', 'unet')

# Which checkpoint each method reads its maps from
METHOD_MODEL = {
    'grad-cam': 'two_logit',
    'sam-multilabel': 'multi_label',
    'sam-binary': 'one_logit',
    'hgi-sam': 'two_logit',
    'unet': 'unet',
}

# Layers fused by default (1-based)
DEFAULT_FUSED_LAYERS = {
    'hgi-sam': (1, 2, 3),
    'sam-binary': (1, 2, 3, 4),
    'sam-multilabel': (1, 2, 3, 4),
}

CHECKPOINT_FORMAT_VERSION = '1'
MIN_DETECTION_PIXELS = 10
UNET_THRESHOLD = 0.5
