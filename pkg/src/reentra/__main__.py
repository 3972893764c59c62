from reentra.cli import main

raise SystemExit(main())
