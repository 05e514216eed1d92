from . import crud_checkpoint, crud_artifact
