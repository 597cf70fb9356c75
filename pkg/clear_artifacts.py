from src.utils.artifact_store import ArtifactStore
from src.utils.config import Config

# Clear experiment artifacts
store = ArtifactStore(Config.STREAM_OUT_DIR)
store.clear()
print(f"Cleared artifacts at {store.out_dir}")
