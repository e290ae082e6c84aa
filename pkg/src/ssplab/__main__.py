from ssplab.cli import main

raise SystemExit(main())
